//! End-to-end hybrid decode loop.
//!
//! Two actors share the device memory and talk over an in-memory channel:
//!
//! * the **context generator** owns sampling state and runs the dynamic
//!   blocks: position extension before each step, then token sampling and
//!   KV appends after it;
//! * the **graph generator** owns the graph cache. For each request it
//!   replays a cached graph for the step's length, or runs the static plan
//!   eagerly and captures a graph for that length.
//!
//! Requests and responses strictly alternate; the autoregressive dependency
//! forbids overlapping steps. Captures on the capture stream overlap with
//! later replay-stream work and land in the cache once their completion
//! event has passed, checked at each step boundary.
//!
//! A run of prompt length `P` and `n` generated tokens performs `P + n`
//! forward steps at lengths `1..=P + n`. The last prefill step samples a seed
//! token that the first decode step consumes; TTFT therefore spans the whole
//! prefill plus one decode step.

use std::fmt;
use std::str::FromStr;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cache::{CacheStats, EvictionPolicy, GraphCache, DEFAULT_CAPACITY};
use crate::device::{
    CostModel, Counters, DispatchMode, EventId, StreamId, Timeline, VirtualDevice,
};
use crate::error::{Error, Result};
use crate::graph::{self, CaptureEngine, ExecGraph};
use crate::kernels::Sampler;
use crate::model::{self, DeviceMemory, Weights, Workspace};
use crate::tensor::{BufferId, KernelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RunMode {
    Eager,
    Hybrid,
    GraphOnly,
    AblateAsync,
    AblateFused,
    AblateBoth,
}

impl RunMode {
    pub const ALL: [RunMode; 6] = [
        RunMode::Eager,
        RunMode::Hybrid,
        RunMode::GraphOnly,
        RunMode::AblateAsync,
        RunMode::AblateFused,
        RunMode::AblateBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Eager => "eager",
            RunMode::Hybrid => "hybrid",
            RunMode::GraphOnly => "graph_only",
            RunMode::AblateAsync => "ablate_async",
            RunMode::AblateFused => "ablate_fused",
            RunMode::AblateBoth => "ablate_both",
        }
    }

    pub fn uses_graphs(self) -> bool {
        self != RunMode::Eager
    }

    /// Stream new captures go to, or `None` if the mode never captures.
    pub fn capture_stream(self) -> Option<StreamId> {
        match self {
            RunMode::Eager | RunMode::GraphOnly => None,
            RunMode::Hybrid | RunMode::AblateFused => Some(StreamId::Capture),
            RunMode::AblateAsync | RunMode::AblateBoth => Some(StreamId::Replay),
        }
    }

    pub fn fuses_dynamic(self) -> bool {
        matches!(
            self,
            RunMode::Hybrid | RunMode::GraphOnly | RunMode::AblateAsync
        )
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        RunMode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { t: f32, seed: u64 },
}

impl Sampling {
    fn sampler(self) -> Sampler {
        match self {
            Sampling::Greedy => Sampler::Greedy,
            Sampling::Temperature { t, seed } => Sampler::Temperature {
                t,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Inclusive range of lengths captured at initialization, truncated to
    /// the model's `max_seq`.
    pub warmup: Option<(usize, usize)>,
    pub cache_capacity: usize,
    pub eviction: EvictionPolicy,
    /// Whether prefill steps may replay and capture graphs.
    pub prefill_uses_graphs: bool,
    pub sampling: Sampling,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            warmup: Some((1, 50)),
            cache_capacity: DEFAULT_CAPACITY,
            eviction: EvictionPolicy::LeastUsed,
            prefill_uses_graphs: true,
            sampling: Sampling::Greedy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPath {
    Replay,
    EagerFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRequest {
    pub step: usize,
    pub len: usize,
    pub input: BufferId,
    pub prefill: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepResponse {
    pub step: usize,
    pub output: BufferId,
    pub path: StepPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRecord {
    pub len: usize,
    pub prefill: bool,
    pub path: StepPath,
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub mode: RunMode,
    pub tokens: Vec<usize>,
    pub ttft_us: f64,
    pub per_token_us: Vec<f64>,
    /// Completion time of the last generated token.
    pub total_us: f64,
    /// Device time including the cleanup synchronization.
    pub elapsed_us: f64,
    pub steps: Vec<StepRecord>,
    pub timeline: Timeline,
    /// Cache activity during this run only.
    pub cache: CacheStats,
}

impl GenerationResult {
    pub fn counters(&self) -> Counters {
        self.timeline.counters
    }

    pub fn replays(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.path == StepPath::Replay)
            .count()
    }

    pub fn fallbacks(&self) -> usize {
        self.steps.len() - self.replays()
    }

    pub fn mean_token_us(&self) -> f64 {
        self.per_token_us.iter().sum::<f64>() / self.per_token_us.len() as f64
    }
}

pub fn ttft(result: &GenerationResult) -> f64 {
    result.ttft_us
}

pub fn per_token_latencies(result: &GenerationResult) -> &[f64] {
    &result.per_token_us
}

struct PendingCapture {
    graph: ExecGraph,
    done: EventId,
}

struct GraphGenerator {
    mode: RunMode,
    prefill_uses_graphs: bool,
    cache: GraphCache,
    capture: CaptureEngine,
    pending: Vec<PendingCapture>,
}

impl GraphGenerator {
    /// Moves captures that completed by `now` into the cache.
    fn poll(&mut self, device: &VirtualDevice, now: f64) -> Result<()> {
        let mut i = 0;
        while i < self.pending.len() {
            match device.event_time(self.pending[i].done)? {
                Some(t) if t <= now => {
                    let p = self.pending.remove(i);
                    self.cache.insert(p.graph.len(), Arc::new(p.graph))?;
                }
                _ => i += 1,
            }
        }
        Ok(())
    }

    fn handle(
        &mut self,
        req: StepRequest,
        weights: &Weights,
        workspace: &mut Workspace,
        device: &mut VirtualDevice,
    ) -> Result<StepResponse> {
        self.poll(device, device.frontier(StreamId::Replay))?;
        let use_graphs = self.mode.uses_graphs() && (!req.prefill || self.prefill_uses_graphs);
        if use_graphs {
            if let Some(g) = self.cache.lookup(req.len) {
                let cached = workspace.kv.cur_len();
                let mut mem = DeviceMemory { weights, workspace };
                graph::replay(&g, device, StreamId::Replay, &mut mem, cached)?;
                return Ok(StepResponse {
                    step: req.step,
                    output: mem.workspace.logits,
                    path: StepPath::Replay,
                });
            }
        }
        let plan = model::static_kernel_plan(weights, req.len, workspace)?;
        model::run_plan_eager(&plan, weights, workspace, device, StreamId::Replay)?;
        if let (true, Some(stream)) = (use_graphs, self.mode.capture_stream()) {
            let kernels = plan.len();
            let graph = self.capture.capture_plan(req.len, plan)?;
            if stream == StreamId::Capture {
                let ev = device.record_event(StreamId::Replay);
                device.wait_event(StreamId::Capture, ev)?;
            }
            let done = device.submit_capture(stream, req.len, kernels)?;
            self.pending.push(PendingCapture { graph, done });
        }
        Ok(StepResponse {
            step: req.step,
            output: workspace.logits,
            path: StepPath::EagerFallback,
        })
    }

    /// Waits for every outstanding capture and inserts it.
    fn synchronize(&mut self, device: &VirtualDevice) -> Result<()> {
        self.poll(device, f64::INFINITY)?;
        debug_assert!(self.pending.is_empty());
        Ok(())
    }
}

struct ContextGenerator {
    sampling: Sampling,
    sampler: Sampler,
    fused: bool,
}

impl ContextGenerator {
    fn dispatch(&self, device: &mut VirtualDevice, specs: &[KernelSpec]) -> Result<EventId> {
        if self.fused {
            return device.submit_fused_block(StreamId::Replay, specs);
        }
        let mut last = None;
        for s in specs {
            last = Some(device.submit_kernel(StreamId::Replay, s, DispatchMode::Eager)?);
        }
        Ok(match last {
            Some(ev) => ev,
            None => device.record_event(StreamId::Replay),
        })
    }
}

struct Channels {
    req_tx: Sender<StepRequest>,
    req_rx: Receiver<StepRequest>,
    resp_tx: Sender<StepResponse>,
    resp_rx: Receiver<StepResponse>,
}

impl Channels {
    fn new() -> Self {
        let (req_tx, req_rx) = channel();
        let (resp_tx, resp_rx) = channel();
        Self {
            req_tx,
            req_rx,
            resp_tx,
            resp_rx,
        }
    }
}

/// A warmed runtime: weights, workspace, graph cache and both actors. Graphs
/// persist across [`Engine::generate`] calls; KV cache and sampler reset.
pub struct Engine {
    weights: Arc<Weights>,
    workspace: Workspace,
    graphs: GraphGenerator,
    context: ContextGenerator,
    warm_pool_bytes: usize,
}

impl Engine {
    pub fn new(weights: Arc<Weights>, mode: RunMode, config: &PipelineConfig) -> Result<Self> {
        let workspace = Workspace::new(weights.config())?;
        let capture = CaptureEngine::new(model::graph_safe_buffers(&weights, &workspace));
        let cache = GraphCache::with_policy(config.cache_capacity, config.eviction)?;
        let mut engine = Self {
            graphs: GraphGenerator {
                mode,
                prefill_uses_graphs: config.prefill_uses_graphs,
                cache,
                capture,
                pending: Vec::new(),
            },
            context: ContextGenerator {
                sampling: config.sampling,
                sampler: config.sampling.sampler(),
                fused: mode.fuses_dynamic(),
            },
            warm_pool_bytes: workspace.pool_bytes(),
            workspace,
            weights,
        };
        if let (true, Some((lo, hi))) = (mode.uses_graphs(), config.warmup) {
            let max_seq = engine.weights.config().max_seq;
            if lo <= max_seq {
                engine.warm_up(lo, hi.min(max_seq))?;
            }
        }
        Ok(engine)
    }

    /// Pre-captures graphs for lengths `lo..=hi`.
    pub fn warm_up(&mut self, lo: usize, hi: usize) -> Result<usize> {
        let Self {
            weights,
            workspace,
            graphs,
            ..
        } = self;
        let capture = &mut graphs.capture;
        let n = graphs.cache.precapture_warmup(lo, hi, |len| {
            let plan = model::static_kernel_plan(weights, len, workspace)?;
            capture.capture_plan(len, plan)
        })?;
        self.warm_pool_bytes = self.workspace.pool_bytes();
        Ok(n)
    }

    /// Captures a graph for `len` outside any run and inserts it.
    pub fn capture_length(&mut self, len: usize) -> Result<Arc<ExecGraph>> {
        let plan = model::static_kernel_plan(&self.weights, len, &self.workspace)?;
        let g = Arc::new(self.graphs.capture.capture_plan(len, plan)?);
        self.graphs.cache.insert(len, Arc::clone(&g))?;
        Ok(g)
    }

    /// Sampling used by subsequent runs; the sampler reseeds on every run.
    pub fn set_sampling(&mut self, sampling: Sampling) {
        self.context.sampling = sampling;
    }

    pub fn mode(&self) -> RunMode {
        self.graphs.mode
    }

    pub fn weights(&self) -> &Arc<Weights> {
        &self.weights
    }

    pub fn cache(&self) -> &GraphCache {
        &self.graphs.cache
    }

    pub fn workspace(&self) -> &Workspace {
        &self.workspace
    }

    /// Activation pool size recorded right after warm-up.
    pub fn warm_pool_bytes(&self) -> usize {
        self.warm_pool_bytes
    }

    pub fn generate(
        &mut self,
        prompt: &[usize],
        n: usize,
        cost: &CostModel,
    ) -> Result<GenerationResult> {
        let max_seq = self.weights.config().max_seq;
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if n == 0 {
            return Err(Error::InvalidConfig(
                "generation length must be at least 1".into(),
            ));
        }
        if prompt.len() + n > max_seq {
            return Err(Error::PromptTooLong {
                prompt: prompt.len(),
                gen: n,
                max_seq,
            });
        }
        let mut device = VirtualDevice::new(cost.clone())?;
        self.workspace.kv.reset();
        self.context.sampler = self.context.sampling.sampler();
        let stats_before = self.graphs.cache.stats();
        if self.graphs.mode.uses_graphs() {
            self.graphs.cache.begin_session();
        }

        let channels = Channels::new();

        let p = prompt.len();
        let mut tokens = Vec::with_capacity(n);
        let mut done_at = Vec::with_capacity(n + 1);
        let mut steps = Vec::with_capacity(p + n);
        let mut next = prompt[0];
        for step in 0..p + n {
            let token = prompt.get(step).copied().unwrap_or(next);
            let prefill = step < p;
            let sample = step + 1 >= p;
            let res = self.step(step, token, prefill, sample, &mut device, &channels);
            let (record, sampled, t) = res.map_err(|e| Error::Step {
                step,
                source: Box::new(e),
            })?;
            steps.push(record);
            if let Some(tok) = sampled {
                next = tok;
                done_at.push(t);
                if !prefill {
                    tokens.push(tok);
                }
            }
        }

        self.graphs.synchronize(&device)?;
        let elapsed_us = device.elapsed();
        if self.graphs.mode.uses_graphs() {
            self.graphs.cache.release_inactive();
        }
        let after = self.graphs.cache.stats();
        let cache = CacheStats {
            hits: after.hits - stats_before.hits,
            misses: after.misses - stats_before.misses,
            inserts: after.inserts - stats_before.inserts,
            evictions: after.evictions - stats_before.evictions,
            size: after.size,
        };
        let per_token_us = done_at.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(GenerationResult {
            mode: self.graphs.mode,
            tokens,
            ttft_us: done_at[1],
            per_token_us,
            total_us: *done_at.last().unwrap(),
            elapsed_us,
            steps,
            timeline: device.into_timeline(),
            cache,
        })
    }

    fn step(
        &mut self,
        step: usize,
        token: usize,
        prefill: bool,
        sample: bool,
        device: &mut VirtualDevice,
        channels: &Channels,
    ) -> Result<(StepRecord, Option<usize>, f64)> {
        let Channels {
            req_tx,
            req_rx,
            resp_tx,
            resp_rx,
        } = channels;
        let weights = &*self.weights;

        // context generator: preprocessing block
        let (ctx, spec) = model::preprocess(weights, &mut self.workspace, token)?;
        self.context.dispatch(device, &[spec])?;
        let req = StepRequest {
            step,
            len: ctx.len,
            input: ctx.input,
            prefill,
        };
        req_tx.send(req).expect("request channel closed");

        // graph generator
        let req = req_rx.recv().expect("request channel closed");
        let resp = self
            .graphs
            .handle(req, weights, &mut self.workspace, device)?;
        resp_tx.send(resp).expect("response channel closed");

        // context generator: sampling and cache update
        let resp = resp_rx.recv().expect("response channel closed");
        assert_eq!(resp.step, step, "responses must arrive in request order");
        let mut specs = Vec::with_capacity(2);
        let mut sampled = None;
        if sample {
            let (t, spec) = model::sample_logits(&self.workspace, &mut self.context.sampler)?;
            sampled = Some(t);
            specs.push(spec);
        }
        specs.push(model::append_step_kv(&mut self.workspace)?);
        let ev = self.context.dispatch(device, &specs)?;
        let t = device.event_time(ev)?.expect("replay stream never blocks");
        Ok((
            StepRecord {
                len: ctx.len,
                prefill,
                path: resp.path,
            },
            sampled,
            t,
        ))
    }
}

/// One complete run on a freshly warmed engine.
pub fn run_inference(
    weights: Arc<Weights>,
    prompt: &[usize],
    n: usize,
    mode: RunMode,
    cost: &CostModel,
    config: &PipelineConfig,
) -> Result<GenerationResult> {
    Engine::new(weights, mode, config)?.generate(prompt, n, cost)
}
