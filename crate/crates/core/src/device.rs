//! A deterministic discrete-event stand-in for the GPU.
//!
//! Two FIFO streams advance a virtual clock by modeled costs. Cross-stream
//! ordering exists only through events. Kernel math is never run here; the
//! caller executes it and submits the matching [`KernelSpec`] for timing.
//!
//! Cost of one work item is `host_us + device_us`, occupying its stream for
//! that long:
//!
//! * eager kernel: `host_dispatch + launch + jitter + alpha * mflops`
//! * fused block: one `host_dispatch`, plus `launch + jitter + alpha * mflops`
//!   for every member
//! * graph replay: `launch + jitter + alpha * total_mflops`, no host charge
//! * capture: `capture_cost_per_kernel * kernel_count`
//!
//! Jitter is `launch * (X - 1)` with `X ~ LogNormal(0, sigma)`, drawn once per
//! launch from a generator seeded only by `jitter_seed`, so a zero-flop
//! kernel's duration is exactly `launch * X`.

use std::collections::VecDeque;
use std::fmt::{self, Write as _};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use crate::error::{Error, Result};
use crate::graph::ExecGraph;
use crate::tensor::{KernelSpec, OpClass};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Jitter {
    None,
    LogNormal { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub launch_overhead_us: f64,
    pub host_dispatch_us: f64,
    pub alpha_us_per_mflop: f64,
    pub capture_cost_us_per_kernel: f64,
    pub jitter: Jitter,
    pub jitter_seed: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            launch_overhead_us: 5.0,
            host_dispatch_us: 8.0,
            alpha_us_per_mflop: 0.01,
            capture_cost_us_per_kernel: 2.0,
            jitter: Jitter::LogNormal { sigma: 0.25 },
            jitter_seed: 0,
        }
    }
}

impl CostModel {
    pub fn without_jitter(mut self) -> Self {
        self.jitter = Jitter::None;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.jitter_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.launch_overhead_us,
            self.host_dispatch_us,
            self.alpha_us_per_mflop,
            self.capture_cost_us_per_kernel,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "negative or non-finite cost rate in {self:?}"
            )));
        }
        if let Jitter::LogNormal { sigma } = self.jitter {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return Err(Error::InvalidConfig(format!("jitter sigma {sigma}")));
            }
        }
        Ok(())
    }

    /// Device-side duration of one launched kernel, excluding jitter.
    pub fn kernel_us(&self, flops: u64) -> f64 {
        self.launch_overhead_us + self.alpha_us_per_mflop * (flops as f64 / 1e6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StreamId {
    Replay,
    Capture,
}

impl StreamId {
    fn index(self) -> usize {
        match self {
            StreamId::Replay => 0,
            StreamId::Capture => 1,
        }
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamId::Replay => "S_REP",
            StreamId::Capture => "S_CAP",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchMode {
    Eager,
    FusedBlockMember,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventId(usize);

impl EventId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItemKind {
    Kernel,
    FusedBlock,
    Replay,
    Capture,
}

impl fmt::Display for ItemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ItemKind::Kernel => "kernel",
            ItemKind::FusedBlock => "fused_block",
            ItemKind::Replay => "replay",
            ItemKind::Capture => "capture",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub ts_us: f64,
    pub stream: StreamId,
    pub kind: ItemKind,
    pub id: String,
    pub duration_us: f64,
    pub host_us: f64,
    pub flops: u64,
    pub kernels: usize,
}

impl TraceRecord {
    pub fn end_us(&self) -> f64 {
        self.ts_us + self.duration_us
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Counters {
    pub dispatches: u64,
    pub kernel_launches: u64,
    pub graph_replays: u64,
    pub captures: u64,
    pub fused_blocks: u64,
    pub host_us: f64,
    pub device_us: f64,
}

impl Counters {
    pub fn to_kv(&self) -> String {
        format!(
            "dispatches={}\nkernel_launches={}\ngraph_replays={}\ncaptures={}\nfused_blocks={}\nhost_us={}\ndevice_us={}\n",
            self.dispatches,
            self.kernel_launches,
            self.graph_replays,
            self.captures,
            self.fused_blocks,
            self.host_us,
            self.device_us
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timeline {
    pub records: Vec<TraceRecord>,
    pub counters: Counters,
}

impl Timeline {
    /// One `ts_us,stream,kind,id,duration_us` line per executed item.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.ts_us, r.stream, r.kind, r.id, r.duration_us
            );
        }
        s
    }

    pub fn on(&self, stream: StreamId) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.stream == stream)
    }
}

#[derive(Debug)]
struct WorkItem {
    kind: ItemKind,
    id: String,
    host_us: f64,
    device_us: f64,
    flops: u64,
    kernels: usize,
    done: EventId,
}

#[derive(Debug)]
enum Pending {
    Work(WorkItem),
    Record(EventId),
    Wait(EventId),
}

#[derive(Debug, Default)]
struct Stream {
    frontier: f64,
    floor: f64,
    queue: VecDeque<Pending>,
}

#[derive(Debug)]
pub struct VirtualDevice {
    cost: CostModel,
    rng: ChaCha8Rng,
    lognormal: Option<LogNormal<f64>>,
    streams: [Stream; 2],
    events: Vec<Option<f64>>,
    timeline: Timeline,
    stopped: bool,
}

impl VirtualDevice {
    pub fn new(cost: CostModel) -> Result<Self> {
        cost.validate()?;
        let lognormal = match cost.jitter {
            Jitter::None => None,
            Jitter::LogNormal { sigma } => Some(
                LogNormal::new(0.0, sigma)
                    .map_err(|e| Error::InvalidConfig(format!("jitter: {e}")))?,
            ),
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cost.jitter_seed),
            cost,
            lognormal,
            streams: Default::default(),
            events: Vec::new(),
            timeline: Timeline::default(),
            stopped: false,
        })
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    pub fn stop(&mut self) {
        self.stopped = true;
    }

    fn check_running(&self) -> Result<()> {
        if self.stopped {
            Err(Error::DeviceStopped)
        } else {
            Ok(())
        }
    }

    fn jitter_draw(&mut self) -> f64 {
        match &self.lognormal {
            None => 0.0,
            Some(d) => self.cost.launch_overhead_us * (d.sample(&mut self.rng) - 1.0),
        }
    }

    fn launch_us(&mut self, flops: u64) -> f64 {
        let j = self.jitter_draw();
        self.cost.kernel_us(flops) + j
    }

    pub fn create_event(&mut self) -> EventId {
        self.events.push(None);
        EventId(self.events.len() - 1)
    }

    fn enqueue(&mut self, stream: StreamId, item: Pending) {
        self.streams[stream.index()].queue.push_back(item);
        self.pump();
    }

    /// Drains every stream as far as event dependencies allow.
    fn pump(&mut self) {
        loop {
            let mut progressed = false;
            for s in [StreamId::Replay, StreamId::Capture] {
                progressed |= self.drain(s);
            }
            if !progressed {
                break;
            }
        }
    }

    fn drain(&mut self, stream: StreamId) -> bool {
        let mut progressed = false;
        loop {
            let st = &mut self.streams[stream.index()];
            let Some(front) = st.queue.front() else { break };
            match front {
                Pending::Wait(ev) => match self.events[ev.0] {
                    Some(t) => {
                        st.floor = st.floor.max(t);
                        st.queue.pop_front();
                    }
                    None => break,
                },
                Pending::Record(ev) => {
                    let ev = *ev;
                    let t = st.frontier.max(st.floor);
                    st.queue.pop_front();
                    self.events[ev.0] = Some(t);
                }
                Pending::Work(_) => {
                    let Some(Pending::Work(w)) = st.queue.pop_front() else {
                        unreachable!()
                    };
                    let start = st.frontier.max(st.floor);
                    let duration = w.host_us + w.device_us;
                    st.frontier = start + duration;
                    self.events[w.done.0] = Some(start + duration);
                    self.timeline.records.push(TraceRecord {
                        ts_us: start,
                        stream,
                        kind: w.kind,
                        id: w.id,
                        duration_us: duration,
                        host_us: w.host_us,
                        flops: w.flops,
                        kernels: w.kernels,
                    });
                }
            }
            progressed = true;
        }
        progressed
    }

    fn push_work(&mut self, stream: StreamId, mut item: WorkItem) -> EventId {
        let done = self.create_event();
        item.done = done;
        let c = &mut self.timeline.counters;
        c.host_us += item.host_us;
        c.device_us += item.device_us;
        self.enqueue(stream, Pending::Work(item));
        done
    }

    pub fn submit_kernel(
        &mut self,
        stream: StreamId,
        spec: &KernelSpec,
        mode: DispatchMode,
    ) -> Result<EventId> {
        self.check_running()?;
        let device_us = self.launch_us(spec.flops);
        let host_us = match mode {
            DispatchMode::Eager => self.cost.host_dispatch_us,
            DispatchMode::FusedBlockMember => 0.0,
        };
        let c = &mut self.timeline.counters;
        c.kernel_launches += 1;
        if mode == DispatchMode::Eager {
            c.dispatches += 1;
        }
        Ok(self.push_work(
            stream,
            WorkItem {
                kind: ItemKind::Kernel,
                id: spec.name.to_string(),
                host_us,
                device_us,
                flops: spec.flops,
                kernels: 1,
                done: EventId(0),
            },
        ))
    }

    /// Dynamic kernels dispatched together: one host charge for the block,
    /// per-member launch and compute. An empty block is a no-op.
    pub fn submit_fused_block(
        &mut self,
        stream: StreamId,
        specs: &[KernelSpec],
    ) -> Result<EventId> {
        self.check_running()?;
        if let Some(s) = specs.iter().find(|s| s.op_class == OpClass::Static) {
            return Err(Error::StaticInFusedBlock(s.name.to_string()));
        }
        if specs.is_empty() {
            return Ok(self.record_event(stream));
        }
        let device_us: f64 = specs.iter().map(|s| self.launch_us(s.flops)).sum();
        let c = &mut self.timeline.counters;
        c.dispatches += 1;
        c.fused_blocks += 1;
        c.kernel_launches += specs.len() as u64;
        let id = specs.iter().map(|s| s.name).collect::<Vec<_>>().join("+");
        Ok(self.push_work(
            stream,
            WorkItem {
                kind: ItemKind::FusedBlock,
                id,
                host_us: self.cost.host_dispatch_us,
                device_us,
                flops: specs.iter().map(|s| s.flops).sum(),
                kernels: specs.len(),
                done: EventId(0),
            },
        ))
    }

    /// Timing of one graph replay: a single launch for the whole graph.
    pub fn submit_replay(&mut self, stream: StreamId, graph: &ExecGraph) -> Result<EventId> {
        self.check_running()?;
        let device_us = self.launch_us(graph.total_flops());
        let c = &mut self.timeline.counters;
        c.dispatches += 1;
        c.kernel_launches += 1;
        c.graph_replays += 1;
        Ok(self.push_work(
            stream,
            WorkItem {
                kind: ItemKind::Replay,
                id: format!("L{}", graph.len()),
                host_us: 0.0,
                device_us,
                flops: graph.total_flops(),
                kernels: graph.kernels().len(),
                done: EventId(0),
            },
        ))
    }

    /// Occupies `stream` for the capture of a `kernel_count`-kernel plan.
    pub fn submit_capture(
        &mut self,
        stream: StreamId,
        len: usize,
        kernel_count: usize,
    ) -> Result<EventId> {
        self.check_running()?;
        self.timeline.counters.captures += 1;
        Ok(self.push_work(
            stream,
            WorkItem {
                kind: ItemKind::Capture,
                id: format!("L{len}"),
                host_us: 0.0,
                device_us: self.cost.capture_cost_us_per_kernel * kernel_count as f64,
                flops: 0,
                kernels: kernel_count,
                done: EventId(0),
            },
        ))
    }

    /// Stamps a new event once all work queued so far on `stream` is done.
    pub fn record_event(&mut self, stream: StreamId) -> EventId {
        let ev = self.create_event();
        self.enqueue(stream, Pending::Record(ev));
        ev
    }

    /// Records a previously created event on `stream`.
    pub fn record_into(&mut self, stream: StreamId, ev: EventId) -> Result<()> {
        if ev.0 >= self.events.len() {
            return Err(Error::UnknownEvent(ev.0));
        }
        self.enqueue(stream, Pending::Record(ev));
        Ok(())
    }

    /// Work queued on `stream` after this call starts no earlier than `ev`.
    /// Waiting on an unrecorded event blocks the stream until it is recorded.
    pub fn wait_event(&mut self, stream: StreamId, ev: EventId) -> Result<()> {
        if ev.0 >= self.events.len() {
            return Err(Error::UnknownEvent(ev.0));
        }
        self.enqueue(stream, Pending::Wait(ev));
        Ok(())
    }

    pub fn event_time(&self, ev: EventId) -> Result<Option<f64>> {
        self.events
            .get(ev.0)
            .copied()
            .ok_or(Error::UnknownEvent(ev.0))
    }

    /// Completion time of the last executed item on `stream`.
    pub fn frontier(&self, stream: StreamId) -> f64 {
        self.streams[stream.index()].frontier
    }

    /// True when no stream has work blocked on an unrecorded event.
    pub fn is_idle(&self) -> bool {
        self.streams.iter().all(|s| s.queue.is_empty())
    }

    pub fn elapsed(&self) -> f64 {
        self.streams.iter().map(|s| s.frontier).fold(0.0, f64::max)
    }

    pub fn counters(&self) -> Counters {
        self.timeline.counters
    }

    pub fn timeline(&self) -> &Timeline {
        &self.timeline
    }

    pub fn into_timeline(self) -> Timeline {
        self.timeline
    }
}
