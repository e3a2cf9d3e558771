//! The online moving-horizon loop.
//!
//! The engine buffers process measurements per source, spawns a state for
//! every measurement from a spawning update source, cuts the process chains
//! between consecutive states, and keeps a window of at most `batch_size`
//! states. Older states are marginalized into a prior constraint.
//!
//! Attachment rules for update measurements at stamp `t` (tolerance `tol`):
//!
//! - older than the oldest state by more than `tol`: dropped;
//! - within `tol` of a state: attached to it;
//! - between states of the window: attached to the nearest state;
//! - newer than the newest state: spawns a state if its source spawns,
//!   otherwise waits until a state is spawned at or after `t - tol`.

pub mod io;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MheError, Result};
use crate::manifold::{ManifoldKind, ParameterBlock};
use crate::marginalization::{marginalize, PriorConstraint};
use crate::problem::{
    compute_chain_weight, propagate, AnchorTerm, ChainSegment, ParamKey, ProcessChain,
    ProcessMeasurement, ProcessModel, ProcessTerm, State, StaticSet, UpdateMeasurement,
    UpdateModel, UpdateTerm,
};
use crate::solver::{self, CostTerm, Problem, SolverOptions, SolverReport, Termination};

/// One block of every state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub kind: ManifoldKind,
    /// Value of the block before any measurement is seen; identity if absent.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
}

/// The blocks making up every state, in index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateLayout {
    pub blocks: Vec<BlockSpec>,
}

impl StateLayout {
    pub fn new(blocks: Vec<BlockSpec>) -> Self {
        Self { blocks }
    }

    /// Appends a block and returns its index.
    pub fn push(&mut self, name: impl Into<String>, kind: ManifoldKind) -> usize {
        self.blocks.push(BlockSpec {
            name: name.into(),
            kind,
            initial: None,
        });
        self.blocks.len() - 1
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn tangent_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.kind.tangent_dim()).sum()
    }

    pub fn initial_blocks(&self) -> Result<Vec<ParameterBlock>> {
        self.blocks
            .iter()
            .map(|b| match &b.initial {
                Some(v) => ParameterBlock::new(b.kind, DVector::from_column_slice(v)),
                None => Ok(ParameterBlock::identity(b.kind)),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Maximum number of states in the window.
    pub batch_size: usize,
    pub solver: SolverOptions,
    /// Update sources whose measurements spawn new states.
    pub spawn_sources: Vec<String>,
    /// Stamp tolerance for attaching measurements to states, seconds.
    pub attach_tolerance: f64,
    /// Diagonal information of the prior on the first state, one entry per
    /// tangent dimension of the state. Empty means `1e-4` everywhere.
    pub initial_information: Vec<f64>,
    /// When false, no state is ever marginalized (batch mode).
    pub marginalize: bool,
    /// Sources (update or process) whose measurements are ignored.
    pub disabled_sources: BTreeSet<String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            batch_size: 5,
            solver: SolverOptions::default(),
            spawn_sources: Vec::new(),
            attach_tolerance: 1e-3,
            initial_information: Vec::new(),
            marginalize: true,
            disabled_sources: BTreeSet::new(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(MheError::Configuration("batch_size must be at least 2".into()));
        }
        if self.spawn_sources.is_empty() {
            return Err(MheError::Configuration(
                "at least one update source must spawn states".into(),
            ));
        }
        if !(self.attach_tolerance >= 0.0 && self.attach_tolerance.is_finite()) {
            return Err(MheError::Configuration(
                "attach_tolerance must be finite and non-negative".into(),
            ));
        }
        if self.initial_information.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(MheError::Configuration(
                "initial_information entries must be positive".into(),
            ));
        }
        self.solver.validate()
    }
}

/// A measurement of either kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Measurement {
    Update(UpdateMeasurement),
    Process(ProcessMeasurement),
}

impl Measurement {
    pub fn stamp(&self) -> f64 {
        match self {
            Measurement::Update(m) => m.stamp,
            Measurement::Process(m) => m.stamp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Older than the window start.
    TooOld,
    /// Process measurement older than data already used for its source.
    OutOfOrder,
    /// The source is disabled.
    Disabled,
    /// Still waiting for a state when [`Engine::finish`] was called.
    Unassigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Spawned(u64),
    Attached(u64),
    Pending,
    Buffered,
    Dropped(DropReason),
}

/// Measurement accounting. For update measurements
/// `updates_ingested == updates_attached + updates_dropped + updates_pending`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub updates_ingested: u64,
    pub updates_attached: u64,
    pub updates_dropped: u64,
    pub updates_pending: u64,
    /// Attached to the nearest state rather than one within the tolerance.
    pub updates_nearest: u64,
    pub process_ingested: u64,
    pub process_dropped: u64,
    pub states_spawned: u64,
    pub states_marginalized: u64,
}

/// Values propagated past the newest state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Propagated {
    pub stamp: f64,
    pub values: BTreeMap<String, Vec<f64>>,
    /// The buffer ended before the requested stamp.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateMetadata {
    pub state_id: u64,
    pub window_len: usize,
    pub termination: Option<Termination>,
    pub accepted_steps: usize,
    pub iterations: usize,
    pub final_cost: f64,
    pub solve_ms: f64,
    pub stalled: bool,
}

/// Newest-state estimate, optionally propagated forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOutput {
    pub stamp: f64,
    pub values: BTreeMap<String, Vec<f64>>,
    pub propagated: Option<Propagated>,
    /// Joint covariance of the newest state's active blocks, in block order.
    pub covariance: Option<DMatrix<f64>>,
    pub metadata: EstimateMetadata,
}

/// Result of a full-batch calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub statics: BTreeMap<String, Vec<f64>>,
    /// Marginal standard deviations of the active statics, when `H` is invertible.
    pub static_sigmas: BTreeMap<String, Vec<f64>>,
    /// Root mean square of the weighted residual components per residual kind.
    pub rms_by_kind: BTreeMap<String, f64>,
    pub solver: SolverReport,
}

/// Thread-safe queue feeding an engine; drained at the next
/// [`Engine::optimize_window`] or [`Engine::drain_inbox`].
#[derive(Debug, Clone, Default)]
pub struct Inbox {
    queue: Arc<Mutex<VecDeque<Measurement>>>,
}

impl Inbox {
    pub fn push(&self, m: Measurement) {
        self.queue.lock().unwrap_or_else(|e| e.into_inner()).push_back(m);
    }

    fn take(&self) -> VecDeque<Measurement> {
        std::mem::take(&mut *self.queue.lock().unwrap_or_else(|e| e.into_inner()))
    }
}

#[derive(Debug, Clone)]
enum Origin {
    Prior(usize),
    Anchor(String),
    Update(String),
    Process(String),
}

impl Origin {
    fn kind(&self) -> String {
        match self {
            Origin::Prior(_) => "prior".into(),
            Origin::Anchor(n) => format!("anchor/{n}"),
            Origin::Update(s) => format!("update/{s}"),
            Origin::Process(s) => format!("process/{s}"),
        }
    }
}

pub struct Engine {
    config: EngineConfig,
    layout: StateLayout,
    update_models: BTreeMap<String, Arc<dyn UpdateModel>>,
    process_models: Vec<Arc<dyn ProcessModel>>,
    statics: StaticSet,
    anchors: BTreeMap<String, Arc<AnchorTerm>>,
    states: VecDeque<State>,
    priors: Vec<Arc<PriorConstraint>>,
    buffers: BTreeMap<String, Vec<ProcessMeasurement>>,
    pending: Vec<Arc<UpdateMeasurement>>,
    inbox: Inbox,
    next_id: u64,
    stats: IngestStats,
    last_report: Option<SolverReport>,
    inactive_blocks: BTreeSet<usize>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("states", &self.states.len())
            .field("statics", &self.statics.len())
            .field("priors", &self.priors.len())
            .field("stats", &self.stats)
            .finish()
    }
}

impl Engine {
    pub fn new(config: EngineConfig, layout: StateLayout) -> Result<Self> {
        config.validate()?;
        if layout.blocks.is_empty() {
            return Err(MheError::Configuration("state layout has no blocks".into()));
        }
        layout.initial_blocks()?;
        if !config.initial_information.is_empty()
            && config.initial_information.len() != layout.tangent_dim()
        {
            return Err(MheError::Configuration(format!(
                "initial_information has {} entries, the state has {} tangent dimensions",
                config.initial_information.len(),
                layout.tangent_dim()
            )));
        }
        Ok(Self {
            config,
            layout,
            update_models: BTreeMap::new(),
            process_models: Vec::new(),
            statics: StaticSet::new(),
            anchors: BTreeMap::new(),
            states: VecDeque::new(),
            priors: Vec::new(),
            buffers: BTreeMap::new(),
            pending: Vec::new(),
            inbox: Inbox::default(),
            next_id: 0,
            stats: IngestStats::default(),
            last_report: None,
            inactive_blocks: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    pub fn stats(&self) -> &IngestStats {
        &self.stats
    }

    pub fn states(&self) -> impl Iterator<Item = &State> {
        self.states.iter()
    }

    pub fn window_len(&self) -> usize {
        self.states.len()
    }

    pub fn newest(&self) -> Option<&State> {
        self.states.back()
    }

    pub fn statics(&self) -> &StaticSet {
        &self.statics
    }

    pub fn priors(&self) -> impl Iterator<Item = &PriorConstraint> {
        self.priors.iter().map(|p| p.as_ref())
    }

    pub fn last_report(&self) -> Option<&SolverReport> {
        self.last_report.as_ref()
    }

    pub fn inbox(&self) -> Inbox {
        self.inbox.clone()
    }

    /// Registers an update model under its name, which measurements use as
    /// their `source`.
    pub fn add_update_model(&mut self, model: Arc<dyn UpdateModel>) -> Result<()> {
        let name = model.name().to_string();
        if self.update_models.contains_key(&name) || self.process_model(&name).is_some() {
            return Err(MheError::Configuration(format!("model `{name}` registered twice")));
        }
        self.check_blocks(&name, model.state_blocks())?;
        self.update_models.insert(name, model);
        Ok(())
    }

    /// Registers a process model. The first enabled process model initializes
    /// new states and drives forward propagation.
    pub fn add_process_model(&mut self, model: Arc<dyn ProcessModel>) -> Result<()> {
        let name = model.name().to_string();
        if self.update_models.contains_key(&name) || self.process_model(&name).is_some() {
            return Err(MheError::Configuration(format!("model `{name}` registered twice")));
        }
        self.check_blocks(&name, model.state_blocks())?;
        for s in model.statics() {
            if !self.statics.contains_key(&s) {
                return Err(MheError::Configuration(format!(
                    "process model `{name}` needs unknown static `{s}`"
                )));
            }
        }
        self.buffers.entry(name).or_default();
        self.process_models.push(model);
        Ok(())
    }

    fn check_blocks(&self, name: &str, blocks: &[usize]) -> Result<()> {
        if let Some(b) = blocks.iter().find(|b| **b >= self.layout.blocks.len()) {
            return Err(MheError::Configuration(format!(
                "model `{name}` refers to state block {b}, the layout has {}",
                self.layout.blocks.len()
            )));
        }
        Ok(())
    }

    fn process_model(&self, name: &str) -> Option<&Arc<dyn ProcessModel>> {
        self.process_models.iter().find(|m| m.name() == name)
    }

    fn enabled(&self, source: &str) -> bool {
        !self.config.disabled_sources.contains(source)
    }

    fn enabled_process_models(&self) -> Vec<Arc<dyn ProcessModel>> {
        self.process_models
            .iter()
            .filter(|m| self.enabled(m.name()))
            .cloned()
            .collect()
    }

    /// Enables or disables a source at runtime. Disabled update sources keep
    /// their attached measurements but contribute no residuals.
    pub fn set_source_enabled(&mut self, source: &str, enabled: bool) -> Result<()> {
        if !self.update_models.contains_key(source) && self.process_model(source).is_none() {
            return Err(MheError::Configuration(format!("unknown source `{source}`")));
        }
        if enabled {
            self.config.disabled_sources.remove(source);
        } else {
            self.config.disabled_sources.insert(source.to_string());
        }
        Ok(())
    }

    pub fn add_static(&mut self, name: impl Into<String>, block: ParameterBlock) -> Result<()> {
        let name = name.into();
        if self.statics.contains_key(&name) {
            return Err(MheError::Configuration(format!("static `{name}` added twice")));
        }
        self.statics.insert(name, block);
        Ok(())
    }

    /// Adds a static with an independent Gaussian prior of the given standard
    /// deviations around its current value.
    pub fn add_static_with_prior(
        &mut self,
        name: impl Into<String>,
        block: ParameterBlock,
        sigmas: &[f64],
    ) -> Result<()> {
        let name = name.into();
        if sigmas.len() != block.tangent_dim() || sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(MheError::Configuration(format!(
                "static `{name}` needs {} positive prior sigmas",
                block.tangent_dim()
            )));
        }
        let info = DVector::from_iterator(sigmas.len(), sigmas.iter().map(|s| 1.0 / s));
        let anchor = AnchorTerm::diagonal(block.clone(), &info)?;
        self.add_static(name.clone(), block)?;
        self.anchors.insert(name, Arc::new(anchor));
        Ok(())
    }

    pub fn static_value(&self, name: &str) -> Option<&ParameterBlock> {
        self.statics.get(name)
    }

    /// Switches a parameter between optimized and constant. Inactive
    /// parameters keep their values; a prior linking one keeps its rows but
    /// its columns are frozen.
    pub fn set_active(&mut self, key: &ParamKey, active: bool) -> Result<()> {
        let block = match key {
            ParamKey::Static(name) => self.statics.get_mut(name),
            ParamKey::State { state, block } => self
                .states
                .iter_mut()
                .find(|s| s.id == *state)
                .and_then(|s| s.blocks.get_mut(*block)),
        };
        match block {
            Some(b) => {
                b.active = active;
                Ok(())
            }
            None => Err(MheError::Configuration(format!("unknown parameter `{key}`"))),
        }
    }

    /// Sets the activity of one block in every current state and in states
    /// spawned later.
    pub fn set_state_block_active(&mut self, block: usize, active: bool) -> Result<()> {
        if block >= self.layout.blocks.len() {
            return Err(MheError::Configuration(format!("no state block {block}")));
        }
        for s in &mut self.states {
            s.blocks[block].active = active;
        }
        if active {
            self.inactive_blocks.remove(&block);
        } else {
            self.inactive_blocks.insert(block);
        }
        Ok(())
    }

    /// Ingests one measurement. Unknown sources and malformed measurements
    /// are errors; late or unusable measurements are dropped and counted.
    pub fn ingest(&mut self, m: Measurement) -> Result<IngestOutcome> {
        match m {
            Measurement::Update(u) => self.ingest_update(u),
            Measurement::Process(p) => self.ingest_process(p),
        }
    }

    /// Ingests everything queued through [`Engine::inbox`].
    pub fn drain_inbox(&mut self) -> Result<()> {
        for m in self.inbox.take() {
            self.ingest(m)?;
        }
        Ok(())
    }

    /// Drops updates still waiting for a state; returns how many.
    pub fn finish(&mut self) -> usize {
        let n = self.pending.len();
        self.pending.clear();
        self.stats.updates_pending -= n as u64;
        self.stats.updates_dropped += n as u64;
        n
    }

    fn lookup_statics(&self, names: &[String]) -> Result<Vec<&ParameterBlock>> {
        names
            .iter()
            .map(|n| {
                self.statics
                    .get(n)
                    .ok_or_else(|| MheError::Configuration(format!("unknown static `{n}`")))
            })
            .collect()
    }

    fn drop_update(&mut self, reason: DropReason) -> IngestOutcome {
        self.stats.updates_dropped += 1;
        IngestOutcome::Dropped(reason)
    }

    fn drop_process(&mut self, reason: DropReason) -> IngestOutcome {
        self.stats.process_dropped += 1;
        IngestOutcome::Dropped(reason)
    }

    fn ingest_update(&mut self, meas: UpdateMeasurement) -> Result<IngestOutcome> {
        let model = self
            .update_models
            .get(&meas.source)
            .cloned()
            .ok_or_else(|| MheError::Configuration(format!("unknown update source `{}`", meas.source)))?;
        if meas.weight_sqrt.nrows() != model.dim() {
            return Err(MheError::DimensionMismatch {
                expected: model.dim(),
                actual: meas.weight_sqrt.nrows(),
            });
        }
        if meas.payload.iter().any(|v| !v.is_finite()) {
            return Err(MheError::InvalidInput(format!(
                "non-finite payload from `{}` at {}",
                meas.source, meas.stamp
            )));
        }
        self.lookup_statics(&model.statics(&meas))?;
        self.stats.updates_ingested += 1;
        if !self.enabled(&meas.source) {
            return Ok(self.drop_update(DropReason::Disabled));
        }
        let tol = self.config.attach_tolerance;
        let spawns = self.config.spawn_sources.contains(&meas.source);
        let meas = Arc::new(meas);
        let (oldest, newest) = match (self.states.front(), self.states.back()) {
            (Some(a), Some(b)) => (a.stamp, b.stamp),
            _ if spawns => return self.spawn_first(meas),
            _ => {
                self.pending.push(meas);
                self.stats.updates_pending += 1;
                return Ok(IngestOutcome::Pending);
            }
        };
        if meas.stamp < oldest - tol {
            return Ok(self.drop_update(DropReason::TooOld));
        }
        if meas.stamp > newest + tol {
            if spawns {
                return self.spawn(meas);
            }
            self.pending.push(meas);
            self.stats.updates_pending += 1;
            return Ok(IngestOutcome::Pending);
        }
        Ok(IngestOutcome::Attached(self.attach(meas)))
    }

    fn attach(&mut self, meas: Arc<UpdateMeasurement>) -> u64 {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, s) in self.states.iter().enumerate() {
            let d = (s.stamp - meas.stamp).abs();
            if d < best_dist {
                best = i;
                best_dist = d;
            }
        }
        if best_dist > self.config.attach_tolerance {
            self.stats.updates_nearest += 1;
        }
        self.stats.updates_attached += 1;
        let state = &mut self.states[best];
        state.updates.push(meas);
        state.id
    }

    fn attach_pending(&mut self) {
        let (oldest, newest) = match (self.states.front(), self.states.back()) {
            (Some(a), Some(b)) => (a.stamp, b.stamp),
            _ => return,
        };
        let tol = self.config.attach_tolerance;
        for m in std::mem::take(&mut self.pending) {
            if m.stamp < oldest - tol {
                self.stats.updates_pending -= 1;
                self.drop_update(DropReason::TooOld);
            } else if m.stamp <= newest + tol {
                self.stats.updates_pending -= 1;
                self.attach(m);
            } else {
                self.pending.push(m);
            }
        }
    }

    fn fresh_blocks(&self) -> Result<Vec<ParameterBlock>> {
        let mut blocks = self.layout.initial_blocks()?;
        for &b in &self.inactive_blocks {
            blocks[b].active = false;
        }
        Ok(blocks)
    }

    fn spawn_first(&mut self, meas: Arc<UpdateMeasurement>) -> Result<IngestOutcome> {
        let mut blocks = self.fresh_blocks()?;
        let model = self.update_models[&meas.source].clone();
        let seed = {
            let statics = self.lookup_statics(&model.statics(&meas))?;
            model.seed(&meas, &statics)
        };
        for (b, v) in seed.unwrap_or_default() {
            let block = blocks.get_mut(b).ok_or_else(|| {
                MheError::Configuration(format!("`{}` seeds unknown block {b}", model.name()))
            })?;
            assign(block, v)?;
        }
        let id = self.next_id;
        self.next_id += 1;
        let state = State::new(id, meas.stamp, blocks);

        let dim = self.layout.tangent_dim();
        let info = if self.config.initial_information.is_empty() {
            vec![1e-4; dim]
        } else {
            self.config.initial_information.clone()
        };
        let mut linked = Vec::new();
        let mut values = Vec::new();
        let mut weights = Vec::new();
        let mut off = 0;
        for (i, b) in state.blocks.iter().enumerate() {
            let d = b.tangent_dim();
            if b.active {
                linked.push(state.key(i));
                values.push(b.clone());
                weights.extend(info[off..off + d].iter().map(|w| w.sqrt()));
            }
            off += d;
        }
        if !weights.is_empty() {
            let n = weights.len();
            self.priors.push(Arc::new(PriorConstraint {
                linked,
                linearization_point: values,
                j_p: DMatrix::from_diagonal(&DVector::from_vec(weights)),
                offset: DVector::zeros(n),
            }));
        }
        self.states.push_back(state);
        self.stats.states_spawned += 1;
        let id = self.attach(meas);
        self.attach_pending();
        Ok(IngestOutcome::Spawned(id))
    }

    fn spawn(&mut self, meas: Arc<UpdateMeasurement>) -> Result<IngestOutcome> {
        let prev = self.states.back().expect("spawn needs a previous state");
        let mut blocks = prev.blocks.clone();
        if let Some(model) = self.enabled_process_models().first() {
            let (segments, _) = cut_segments(&self.buffers[model.name()], prev.stamp, meas.stamp);
            if !segments.is_empty() {
                let portion: Vec<&ParameterBlock> =
                    model.state_blocks().iter().map(|&b| &prev.blocks[b]).collect();
                let statics = self.lookup_statics(&model.statics())?;
                let prop = propagate(model.as_ref(), &portion, &segments, &statics, None)?;
                for (&b, v) in model.state_blocks().iter().zip(prop.predicted) {
                    blocks[b].set_value(v.value().clone())?;
                }
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.states.push_back(State::new(id, meas.stamp, blocks));
        self.stats.states_spawned += 1;
        self.attach(meas);
        self.complete_chains()?;
        self.attach_pending();
        Ok(IngestOutcome::Spawned(id))
    }

    fn ingest_process(&mut self, m: ProcessMeasurement) -> Result<IngestOutcome> {
        let name = match self.process_model(&m.source) {
            Some(model) => model.name().to_string(),
            None => {
                return Err(MheError::Configuration(format!(
                    "unknown process source `{}`",
                    m.source
                )))
            }
        };
        if !m.stamp.is_finite() || m.input.iter().any(|v| !v.is_finite()) {
            return Err(MheError::InvalidInput(format!(
                "non-finite process measurement from `{name}` at {}",
                m.stamp
            )));
        }
        self.stats.process_ingested += 1;
        if !self.enabled(&name) {
            return Ok(self.drop_process(DropReason::Disabled));
        }
        let tol = self.config.attach_tolerance;
        let buffer = &self.buffers[&name];
        if buffer.last().is_some_and(|last| m.stamp < last.stamp - tol) {
            return Ok(self.drop_process(DropReason::OutOfOrder));
        }
        if let Some(newest) = self.states.back() {
            let used = newest.incoming.contains_key(&name) || self.states.len() == 1;
            if used && m.stamp <= newest.stamp {
                return Ok(self.drop_process(DropReason::TooOld));
            }
        }
        let buffer = self.buffers.get_mut(&name).expect("buffer exists for every process model");
        let at = buffer.partition_point(|x| x.stamp <= m.stamp);
        buffer.insert(at, m);
        self.complete_chains_for(&name)?;
        Ok(IngestOutcome::Buffered)
    }

    fn build_chain(&self, model: &Arc<dyn ProcessModel>, i: usize) -> Result<Option<ProcessChain>> {
        let prev = &self.states[i - 1];
        let next = &self.states[i];
        let (segments, covered) = cut_segments(&self.buffers[model.name()], prev.stamp, next.stamp);
        if covered < next.stamp || segments.is_empty() {
            return Ok(None);
        }
        let portion: Vec<&ParameterBlock> =
            model.state_blocks().iter().map(|&b| &prev.blocks[b]).collect();
        let statics = self.lookup_statics(&model.statics())?;
        let weight_sqrt = compute_chain_weight(model.as_ref(), &portion, &segments, &statics, None)?;
        Ok(Some(ProcessChain {
            source: model.name().to_string(),
            start: prev.stamp,
            end: next.stamp,
            segments,
            weight_sqrt,
        }))
    }

    fn complete_chains(&mut self) -> Result<()> {
        for model in self.enabled_process_models() {
            for i in 1..self.states.len() {
                if self.states[i].incoming.contains_key(model.name()) {
                    continue;
                }
                if let Some(chain) = self.build_chain(&model, i)? {
                    self.states[i].incoming.insert(model.name().to_string(), Arc::new(chain));
                }
            }
        }
        Ok(())
    }

    fn complete_chains_for(&mut self, name: &str) -> Result<()> {
        let model = match self.process_model(name) {
            Some(m) => m.clone(),
            None => return Ok(()),
        };
        // Chains complete in stamp order, so only the newest states can be missing.
        for i in (1..self.states.len()).rev() {
            if self.states[i].incoming.contains_key(name) {
                break;
            }
            if let Some(chain) = self.build_chain(&model, i)? {
                self.states[i].incoming.insert(name.to_string(), Arc::new(chain));
            }
        }
        Ok(())
    }

    fn ensure_chains(&mut self) -> Result<()> {
        self.complete_chains()?;
        for model in self.enabled_process_models() {
            for s in self.states.iter().skip(1) {
                if !s.incoming.contains_key(model.name()) {
                    return Err(MheError::Assignment(format!(
                        "process chain `{}` into the state at {} is incomplete",
                        model.name(),
                        s.stamp
                    )));
                }
            }
        }
        Ok(())
    }

    fn assemble(&self) -> Result<(Problem, Vec<Origin>)> {
        let mut p = Problem::new();
        for (n, b) in &self.statics {
            p.add_param(ParamKey::Static(n.clone()), b.clone());
        }
        for s in &self.states {
            for (i, b) in s.blocks.iter().enumerate() {
                p.add_param(s.key(i), b.clone());
            }
        }
        let mut origins = Vec::new();
        for (i, prior) in self.priors.iter().enumerate() {
            if prior.is_empty() {
                continue;
            }
            let term: Arc<dyn CostTerm> = prior.clone();
            p.add_residual("prior", prior.linked.clone(), term, false)?;
            origins.push(Origin::Prior(i));
        }
        for (n, anchor) in &self.anchors {
            let term: Arc<dyn CostTerm> = anchor.clone();
            p.add_residual(format!("anchor/{n}"), vec![ParamKey::Static(n.clone())], term, false)?;
            origins.push(Origin::Anchor(n.clone()));
        }
        for (i, s) in self.states.iter().enumerate() {
            for u in &s.updates {
                if !self.enabled(&u.source) {
                    continue;
                }
                let model = self.update_models[&u.source].clone();
                let mut keys: Vec<ParamKey> = model.state_blocks().iter().map(|&b| s.key(b)).collect();
                keys.extend(model.statics(u).into_iter().map(ParamKey::Static));
                let term = Arc::new(UpdateTerm {
                    model,
                    meas: u.clone(),
                });
                p.add_residual(format!("update/{}@{}", u.source, s.id), keys, term, true)?;
                origins.push(Origin::Update(u.source.clone()));
            }
            if i == 0 {
                continue;
            }
            let prev = &self.states[i - 1];
            for (name, chain) in &s.incoming {
                let model = match self.process_model(name) {
                    Some(m) if self.enabled(name) => m.clone(),
                    _ => continue,
                };
                let mut keys: Vec<ParamKey> = model.state_blocks().iter().map(|&b| prev.key(b)).collect();
                keys.extend(model.state_blocks().iter().map(|&b| s.key(b)));
                keys.extend(model.statics().into_iter().map(ParamKey::Static));
                let term = Arc::new(ProcessTerm {
                    model,
                    chain: chain.clone(),
                });
                p.add_residual(format!("process/{name}@{}", s.id), keys, term, false)?;
                origins.push(Origin::Process(name.clone()));
            }
        }
        Ok((p, origins))
    }

    /// The window as a least-squares problem at the current values.
    pub fn problem(&self) -> Result<Problem> {
        Ok(self.assemble()?.0)
    }

    fn write_back(&mut self, problem: &Problem) {
        for s in &mut self.states {
            for (i, b) in s.blocks.iter_mut().enumerate() {
                if let Some(v) = problem.params.get(&ParamKey::state(s.id, i)) {
                    *b = v.clone();
                }
            }
        }
        for (n, b) in &mut self.statics {
            if let Some(v) = problem.params.get(&ParamKey::Static(n.clone())) {
                *b = v.clone();
            }
        }
    }

    /// Marginalizes states beyond `batch_size` (unless disabled), then
    /// optimizes the window and returns the newest-state estimate.
    pub fn optimize_window(&mut self) -> Result<EstimateOutput> {
        self.drain_inbox()?;
        if self.states.is_empty() {
            return Err(MheError::InvalidInput("no states to optimize".into()));
        }
        self.ensure_chains()?;
        if self.config.marginalize {
            while self.states.len() > self.config.batch_size {
                self.slide()?;
            }
        }
        let (mut problem, _) = self.assemble()?;
        let report = solver::optimize(&mut problem, &self.config.solver)?;
        self.write_back(&problem);
        self.last_report = Some(report);
        self.estimate()
    }

    /// Marginalizes the oldest state: its update residuals, its outgoing
    /// process residuals and any prior touching it become one new prior over
    /// the next state and the statics involved.
    pub fn slide(&mut self) -> Result<()> {
        if self.states.len() < 2 {
            return Err(MheError::InvalidInput("sliding needs at least two states".into()));
        }
        self.ensure_chains()?;
        let (problem, origins) = self.assemble()?;
        let oldest = &self.states[0];
        let params_m: Vec<ParamKey> = (0..oldest.blocks.len()).map(|b| oldest.key(b)).collect();
        let (prior, consumed) = marginalize(&problem, &params_m, self.config.solver.loss)?;
        let consumed: BTreeSet<usize> = consumed
            .iter()
            .filter_map(|&i| match origins[i] {
                Origin::Prior(p) => Some(p),
                _ => None,
            })
            .collect();
        let mut priors: Vec<Arc<PriorConstraint>> = std::mem::take(&mut self.priors)
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !consumed.contains(i))
            .map(|(_, p)| p)
            .collect();
        if let Some(p) = prior.filter(|p| !p.is_empty()) {
            priors.push(Arc::new(p));
        }
        self.priors = priors;
        self.states.pop_front();
        self.stats.states_marginalized += 1;
        if let Some(front) = self.states.front_mut() {
            front.incoming.clear();
            let start = front.stamp;
            for buffer in self.buffers.values_mut() {
                let n = buffer.partition_point(|m| m.stamp <= start);
                buffer.drain(..n);
            }
        }
        Ok(())
    }

    fn values_of(&self, blocks: &[ParameterBlock]) -> BTreeMap<String, Vec<f64>> {
        self.layout
            .blocks
            .iter()
            .zip(blocks)
            .map(|(spec, b)| (spec.name.clone(), b.value().as_slice().to_vec()))
            .collect()
    }

    /// Estimate of the newest state with the last solver report.
    pub fn estimate(&self) -> Result<EstimateOutput> {
        let s = self
            .states
            .back()
            .ok_or_else(|| MheError::InvalidInput("no states".into()))?;
        let r = self.last_report.as_ref();
        Ok(EstimateOutput {
            stamp: s.stamp,
            values: self.values_of(&s.blocks),
            propagated: None,
            covariance: None,
            metadata: EstimateMetadata {
                state_id: s.id,
                window_len: self.states.len(),
                termination: r.map(|r| r.termination),
                accepted_steps: r.map_or(0, |r| r.accepted_steps),
                iterations: r.map_or(0, |r| r.iterations.len()),
                final_cost: r.map_or(0.0, |r| r.final_cost),
                solve_ms: r.map_or(0.0, |r| r.total_ms()),
                stalled: r.is_some_and(|r| r.stalled()),
            },
        })
    }

    /// Propagates the newest state through buffered process measurements of
    /// the first enabled process model up to `to_stamp`, without optimizing.
    /// Stops at the end of the buffer and flags truncation.
    pub fn forward_propagate(&self, to_stamp: f64) -> Result<EstimateOutput> {
        let mut out = self.estimate()?;
        let s = self.states.back().expect("estimate succeeded");
        if to_stamp < s.stamp - self.config.attach_tolerance {
            return Err(MheError::InvalidInput(format!(
                "cannot propagate backwards from {} to {to_stamp}",
                s.stamp
            )));
        }
        let to_stamp = to_stamp.max(s.stamp);
        let mut blocks = s.blocks.clone();
        let mut stamp = s.stamp;
        let mut truncated = to_stamp > s.stamp;
        if let Some(model) = self.enabled_process_models().first() {
            let (segments, covered) = cut_segments(&self.buffers[model.name()], s.stamp, to_stamp);
            if !segments.is_empty() {
                let portion: Vec<&ParameterBlock> =
                    model.state_blocks().iter().map(|&b| &s.blocks[b]).collect();
                let statics = self.lookup_statics(&model.statics())?;
                let prop = propagate(model.as_ref(), &portion, &segments, &statics, None)?;
                for (&b, v) in model.state_blocks().iter().zip(prop.predicted) {
                    blocks[b] = v;
                }
            }
            truncated = covered < to_stamp;
            stamp = covered;
        }
        out.propagated = Some(Propagated {
            stamp,
            values: self.values_of(&blocks),
            truncated,
        });
        Ok(out)
    }

    /// Joint covariance of the given parameters from `H^{-1}` at the current values.
    pub fn covariance(&self, keys: &[ParamKey]) -> Result<DMatrix<f64>> {
        let problem = self.problem()?;
        solver::covariance(&problem, keys, &self.config.solver)
    }

    /// Joint covariance of the newest state's active blocks.
    pub fn newest_covariance(&self) -> Result<DMatrix<f64>> {
        let s = self
            .states
            .back()
            .ok_or_else(|| MheError::InvalidInput("no states".into()))?;
        let keys: Vec<ParamKey> = (0..s.blocks.len())
            .filter(|&i| s.blocks[i].active)
            .map(|i| s.key(i))
            .collect();
        self.covariance(&keys)
    }

    /// Optimizes every ingested state and the active statics jointly.
    /// Requires marginalization to be disabled.
    pub fn batch_calibrate(&mut self) -> Result<CalibrationReport> {
        if self.config.marginalize {
            return Err(MheError::Configuration(
                "batch calibration needs marginalization disabled".into(),
            ));
        }
        self.drain_inbox()?;
        if self.states.is_empty() {
            return Err(MheError::InvalidInput("no states to calibrate".into()));
        }
        self.ensure_chains()?;
        let (mut problem, origins) = self.assemble()?;
        let report = solver::optimize(&mut problem, &self.config.solver)?;
        self.write_back(&problem);

        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (r, origin) in problem.residuals.iter().zip(&origins) {
            let params: Vec<&ParameterBlock> = r.params.iter().map(|k| &problem.params[k]).collect();
            let (e, _) = r.term.evaluate(&params)?;
            let entry = sums.entry(origin.kind()).or_insert((0.0, 0));
            entry.0 += e.norm_squared();
            entry.1 += e.len();
        }
        let rms_by_kind = sums
            .into_iter()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(k, (s, n))| (k, (s / n as f64).sqrt()))
            .collect();

        let layout = problem.layout();
        let active: Vec<ParamKey> = self
            .statics
            .keys()
            .map(|n| ParamKey::Static(n.clone()))
            .filter(|k| layout.position(k).is_some())
            .collect();
        let mut static_sigmas = BTreeMap::new();
        if !active.is_empty() {
            if let Ok(cov) = solver::covariance(&problem, &active, &self.config.solver) {
                let mut off = 0;
                for k in &active {
                    let d = problem.params[k].tangent_dim();
                    let sig = (off..off + d).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
                    static_sigmas.insert(k.to_string(), sig);
                    off += d;
                }
            }
        }
        let statics = self
            .statics
            .iter()
            .map(|(n, b)| (n.clone(), b.value().as_slice().to_vec()))
            .collect();
        self.last_report = Some(report.clone());
        Ok(CalibrationReport {
            statics,
            static_sigmas,
            rms_by_kind,
            solver: report,
        })
    }
}

/// Stamps closer than this are treated as equal when cutting chains.
const STAMP_EPS: f64 = 1e-9;

/// Segments of a stamp-sorted buffer over `(start, end]`. A measurement at
/// `t_k` holds its input over `(t_{k-1}, t_k]` (backward zero-order hold).
/// Returns the segments and the stamp up to which the buffer covers the
/// interval; the interval is fully covered when that equals `end`.
pub fn cut_segments(buffer: &[ProcessMeasurement], start: f64, end: f64) -> (Vec<ChainSegment>, f64) {
    let mut segments = Vec::new();
    let mut t = start;
    let first = buffer.partition_point(|m| m.stamp <= start + STAMP_EPS);
    for m in &buffer[first..] {
        let e = if m.stamp >= end - STAMP_EPS { end } else { m.stamp };
        if e > t {
            segments.push(ChainSegment::new(t, e, m.input.clone()));
            t = e;
        }
        if e >= end {
            break;
        }
    }
    (segments, t)
}

fn assign(block: &mut ParameterBlock, v: DVector<f64>) -> Result<()> {
    if v.len() != block.kind.ambient_dim() {
        return Err(MheError::DimensionMismatch {
            expected: block.kind.ambient_dim(),
            actual: v.len(),
        });
    }
    block.set_value(block.kind.normalize(&v))
}
