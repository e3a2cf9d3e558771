//! Estimate streams, problem-structure dumps and engine snapshots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Engine, IngestStats};
use crate::error::{MheError, Result};
use crate::manifold::ParameterBlock;
use crate::marginalization::PriorConstraint;
use crate::problem::{AnchorTerm, ParamKey, ProcessChain, ProcessMeasurement, State, UpdateMeasurement};

/// Version of the snapshot schema.
pub const SNAPSHOT_VERSION: u32 = 1;

/// Writes one estimate as a single JSON line.
pub fn write_ndjson<W: Write, T: Serialize>(out: &mut W, record: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")
        .map_err(|e| MheError::Serialization(e.to_string()))
}

/// Residual/parameter adjacency of the current window in DOT format.
/// Parameters are ellipses, residuals are boxes.
pub fn structure_dot(engine: &Engine) -> Result<String> {
    let problem = engine.problem()?;
    let mut dot = String::from("graph mhe {\n  node [shape=ellipse];\n");
    let mut names: BTreeMap<&ParamKey, String> = BTreeMap::new();
    for (i, (key, block)) in problem.params.iter().enumerate() {
        let name = format!("p{i}");
        let style = if block.active { "" } else { ", style=dashed" };
        let _ = writeln!(dot, "  {name} [label=\"{key}\"{style}];");
        names.insert(key, name);
    }
    for (j, r) in problem.residuals.iter().enumerate() {
        let _ = writeln!(dot, "  r{j} [shape=box, label=\"{}\"];", r.label);
        for k in &r.params {
            let _ = writeln!(dot, "  r{j} -- {};", names[k]);
        }
    }
    dot.push_str("}\n");
    Ok(dot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub id: u64,
    pub stamp: f64,
    pub blocks: Vec<ParameterBlock>,
    pub updates: Vec<UpdateMeasurement>,
    pub incoming: BTreeMap<String, ProcessChain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSnapshot {
    pub anchor: ParameterBlock,
    pub sqrt_information: DMatrix<f64>,
}

/// Everything needed to resume an engine built with the same models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub version: u32,
    pub next_id: u64,
    pub states: Vec<StateSnapshot>,
    pub statics: BTreeMap<String, ParameterBlock>,
    pub anchors: BTreeMap<String, AnchorSnapshot>,
    pub priors: Vec<PriorConstraint>,
    pub buffers: BTreeMap<String, Vec<ProcessMeasurement>>,
    pub pending: Vec<UpdateMeasurement>,
    pub stats: IngestStats,
}

impl Engine {
    pub fn snapshot(&self) -> EngineSnapshot {
        EngineSnapshot {
            version: SNAPSHOT_VERSION,
            next_id: self.next_id,
            states: self
                .states
                .iter()
                .map(|s| StateSnapshot {
                    id: s.id,
                    stamp: s.stamp,
                    blocks: s.blocks.clone(),
                    updates: s.updates.iter().map(|u| (**u).clone()).collect(),
                    incoming: s.incoming.iter().map(|(k, c)| (k.clone(), (**c).clone())).collect(),
                })
                .collect(),
            statics: self.statics.clone(),
            anchors: self
                .anchors
                .iter()
                .map(|(k, a)| {
                    (
                        k.clone(),
                        AnchorSnapshot {
                            anchor: a.anchor.clone(),
                            sqrt_information: a.sqrt_information.clone(),
                        },
                    )
                })
                .collect(),
            priors: self.priors.iter().map(|p| (**p).clone()).collect(),
            buffers: self.buffers.clone(),
            pending: self.pending.iter().map(|u| (**u).clone()).collect(),
            stats: self.stats.clone(),
        }
    }

    /// Replaces the window, statics, priors and buffers with a snapshot.
    /// Models must already be registered under the names the snapshot uses.
    pub fn restore(&mut self, snap: EngineSnapshot) -> Result<()> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(MheError::Serialization(format!(
                "snapshot version {} is not supported",
                snap.version
            )));
        }
        for s in &snap.states {
            if s.blocks.len() != self.layout.blocks.len()
                || s.blocks.iter().zip(&self.layout.blocks).any(|(b, spec)| b.kind != spec.kind)
            {
                return Err(MheError::Configuration(format!(
                    "snapshot state {} does not match the state layout",
                    s.id
                )));
            }
            for u in &s.updates {
                if !self.update_models.contains_key(&u.source) {
                    return Err(MheError::Configuration(format!("unknown update source `{}`", u.source)));
                }
            }
            for name in s.incoming.keys() {
                if self.process_model(name).is_none() {
                    return Err(MheError::Configuration(format!("unknown process source `{name}`")));
                }
            }
        }
        for name in snap.buffers.keys() {
            if self.process_model(name).is_none() {
                return Err(MheError::Configuration(format!("unknown process source `{name}`")));
            }
        }
        let mut anchors = BTreeMap::new();
        for (k, a) in snap.anchors {
            anchors.insert(k, Arc::new(AnchorTerm::new(a.anchor, a.sqrt_information)?));
        }
        self.states = snap
            .states
            .into_iter()
            .map(|s| {
                let mut state = State::new(s.id, s.stamp, s.blocks);
                state.updates = s.updates.into_iter().map(Arc::new).collect();
                state.incoming = s.incoming.into_iter().map(|(k, c)| (k, Arc::new(c))).collect();
                state
            })
            .collect();
        self.next_id = snap.next_id;
        self.statics = snap.statics;
        self.anchors = anchors;
        self.priors = snap.priors.into_iter().map(Arc::new).collect();
        for (k, b) in snap.buffers {
            self.buffers.insert(k, b);
        }
        self.pending = snap.pending.into_iter().map(Arc::new).collect();
        self.stats = snap.stats;
        self.last_report = None;
        Ok(())
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.snapshot())?;
        std::fs::write(path, text).map_err(|e| MheError::Serialization(format!("{}: {e}", path.display())))
    }

    pub fn load_snapshot(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MheError::Serialization(format!("{}: {e}", path.display())))?;
        let snap: EngineSnapshot = serde_json::from_str(&text)?;
        self.restore(snap)
    }
}
