//! Capture and replay of static kernel sequences.
//!
//! A [`CaptureSession`] records bound [`KernelInvocation`]s for one sequence
//! length. Closing it yields an immutable [`ExecGraph`] whose buffer bindings
//! and shapes are frozen; [`replay`] runs the whole graph as one device
//! submission.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use crate::device::{EventId, StreamId, VirtualDevice};
use crate::error::{Error, Result};
use crate::kernels::{KernelInvocation, Memory};
use crate::tensor::{BufferId, OpClass};

#[derive(Debug, Clone, PartialEq)]
pub struct ExecGraph {
    len: usize,
    kernels: Vec<KernelInvocation>,
    total_flops: u64,
    footprint: BTreeSet<BufferId>,
    frozen: Vec<(BufferId, Vec<usize>)>,
    capture_epoch: u64,
}

impl ExecGraph {
    /// Sequence length this graph was captured for.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn kernels(&self) -> &[KernelInvocation] {
        &self.kernels
    }

    pub fn total_flops(&self) -> u64 {
        self.total_flops
    }

    pub fn footprint(&self) -> &BTreeSet<BufferId> {
        &self.footprint
    }

    pub fn capture_epoch(&self) -> u64 {
        self.capture_epoch
    }

    /// Human-readable listing: one line per kernel with index, name, bound
    /// shapes and flops.
    pub fn dump(&self) -> String {
        let mut s = format!(
            "graph L={} kernels={} flops={} epoch={}\n",
            self.len,
            self.kernels.len(),
            self.total_flops,
            self.capture_epoch
        );
        for (i, k) in self.kernels.iter().enumerate() {
            let shapes: Vec<String> = k
                .spec
                .bindings()
                .map(|id| {
                    let shape = &k.shapes.iter().find(|(b, _)| *b == id).unwrap().1;
                    format!("{shape:?}")
                })
                .collect();
            let _ = writeln!(
                s,
                "{i:4} {:<16} {} flops={}",
                k.spec.name,
                shapes.join(" "),
                k.spec.flops
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Open,
    Closed,
    Aborted,
}

#[derive(Debug)]
pub struct CaptureSession {
    len: usize,
    recorded: Vec<KernelInvocation>,
    state: SessionState,
}

impl CaptureSession {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn recorded(&self) -> usize {
        self.recorded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recorded.is_empty()
    }

    pub fn state(&self) -> SessionState {
        self.state
    }
}

/// Issues capture sessions and validates what they record. Only buffers in
/// the allowed set (workspace and weights) may be bound by a captured kernel.
#[derive(Debug, Clone)]
pub struct CaptureEngine {
    allowed: HashSet<BufferId>,
    open: HashSet<usize>,
    next_epoch: u64,
}

impl CaptureEngine {
    pub fn new(allowed: impl IntoIterator<Item = BufferId>) -> Self {
        Self {
            allowed: allowed.into_iter().collect(),
            open: HashSet::new(),
            next_epoch: 0,
        }
    }

    pub fn begin_capture(&mut self, len: usize) -> Result<CaptureSession> {
        if !self.open.insert(len) {
            return Err(Error::CaptureInProgress(len));
        }
        Ok(CaptureSession {
            len,
            recorded: Vec::new(),
            state: SessionState::Open,
        })
    }

    fn abort(&mut self, session: &mut CaptureSession) {
        session.state = SessionState::Aborted;
        session.recorded.clear();
        self.open.remove(&session.len);
    }

    /// Appends a static invocation. A dynamic kernel or a foreign buffer
    /// aborts the session.
    pub fn record(&mut self, session: &mut CaptureSession, inv: KernelInvocation) -> Result<()> {
        if session.state != SessionState::Open {
            return Err(Error::SessionClosed);
        }
        if inv.spec.op_class == OpClass::Dynamic {
            self.abort(session);
            return Err(Error::CaptureViolation(inv.spec.name.to_string()));
        }
        if let Some(buffer) = inv.spec.bindings().find(|b| !self.allowed.contains(b)) {
            self.abort(session);
            return Err(Error::ForeignBuffer {
                kernel: inv.spec.name.to_string(),
                buffer,
            });
        }
        session.recorded.push(inv);
        Ok(())
    }

    pub fn end_capture(&mut self, session: &mut CaptureSession) -> Result<ExecGraph> {
        if session.state != SessionState::Open {
            return Err(Error::SessionClosed);
        }
        session.state = SessionState::Closed;
        self.open.remove(&session.len);
        if session.recorded.is_empty() {
            return Err(Error::EmptyCapture);
        }
        let kernels = std::mem::take(&mut session.recorded);
        let total_flops = kernels.iter().map(|k| k.spec.flops).sum();
        let mut frozen: Vec<(BufferId, Vec<usize>)> = Vec::new();
        for (id, shape) in kernels.iter().flat_map(|k| k.shapes.iter()) {
            if !frozen.iter().any(|(b, _)| b == id) {
                frozen.push((*id, shape.clone()));
            }
        }
        let footprint = frozen.iter().map(|(b, _)| *b).collect();
        let capture_epoch = self.next_epoch;
        self.next_epoch += 1;
        Ok(ExecGraph {
            len: session.len,
            kernels,
            total_flops,
            footprint,
            frozen,
            capture_epoch,
        })
    }

    /// Records a whole plan for `len` in one session.
    pub fn capture_plan(&mut self, len: usize, plan: Vec<KernelInvocation>) -> Result<ExecGraph> {
        let mut session = self.begin_capture(len)?;
        for inv in plan {
            self.record(&mut session, inv)?;
        }
        self.end_capture(&mut session)
    }

    pub fn is_open(&self, len: usize) -> bool {
        self.open.contains(&len)
    }

    pub fn allowed_buffers(&self) -> usize {
        self.allowed.len()
    }
}

/// Checks that the live buffers still match the graph's frozen bindings and
/// that `cached_len` positions precede the step the graph was captured for.
pub fn validate_replay(graph: &ExecGraph, mem: &dyn Memory, cached_len: usize) -> Result<()> {
    if cached_len + 1 != graph.len {
        return Err(Error::WrongLength {
            graph_len: graph.len,
            cached: cached_len,
        });
    }
    for (id, frozen) in &graph.frozen {
        let t = mem.get(*id).ok_or(Error::UnknownBuffer(*id))?;
        if t.shape() != frozen.as_slice() {
            return Err(Error::ReplayShapeError {
                buffer: *id,
                frozen: frozen.clone(),
                actual: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Executes every kernel of `graph` in captured order and charges the device
/// for a single submission.
pub fn replay(
    graph: &ExecGraph,
    device: &mut VirtualDevice,
    stream: StreamId,
    mem: &mut dyn Memory,
    cached_len: usize,
) -> Result<EventId> {
    validate_replay(graph, mem, cached_len)?;
    for k in &graph.kernels {
        k.execute(mem)?;
    }
    device.submit_replay(stream, graph)
}
