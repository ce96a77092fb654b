#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hybrid_graph::device::{CostModel, ItemKind, StreamId, Timeline, TraceRecord, VirtualDevice};
use hybrid_graph::graph::{self, CaptureEngine, ExecGraph};
use hybrid_graph::kernels::{KernelInvocation, StaticOp};
use hybrid_graph::model::{self, init_model, DeviceMemory, ModelConfig, Weights, Workspace};
use hybrid_graph::tensor::BufferStore;

pub fn weights(seed: u64) -> Arc<Weights> {
    Arc::new(
        init_model(ModelConfig {
            seed,
            ..ModelConfig::default()
        })
        .unwrap(),
    )
}

pub fn small_weights(seed: u64) -> Arc<Weights> {
    Arc::new(
        init_model(ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab: 40,
            max_seq: 128,
            seed,
        })
        .unwrap(),
    )
}

pub fn random_tokens(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Outcome of running the step at length `len` once eagerly and once by
/// replaying a captured graph, from identical starting states.
pub struct ReplayCase {
    pub eager_logits: Vec<f32>,
    pub replay_logits: Vec<f32>,
    pub eager_x: Vec<f32>,
    pub replay_x: Vec<f32>,
    pub plan_len: usize,
    pub replay_dispatches: u64,
}

/// Fills the cache with `len - 1` random positions, overwrites the step
/// input with random values and leaves the workspace ready for step `len`.
fn prepared(w: &Weights, len: usize, seed: u64) -> Workspace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = Workspace::new(w.config()).unwrap();
    let mut dev = VirtualDevice::new(CostModel::default().without_jitter()).unwrap();
    for tok in random_tokens(&mut rng, len - 1, w.config().vocab) {
        let (ctx, _) = model::preprocess(w, &mut ws, tok).unwrap();
        model::forward_eager(w, &mut ws, &ctx, &mut dev, StreamId::Replay).unwrap();
        model::append_step_kv(&mut ws).unwrap();
    }
    let tok = rng.random_range(0..w.config().vocab);
    model::preprocess(w, &mut ws, tok).unwrap();
    let x = ws.x;
    for v in ws.store_mut().get_mut(x).unwrap().data_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    ws
}

pub fn replay_vs_eager(w: &Weights, len: usize, seed: u64) -> ReplayCase {
    let mut dev = VirtualDevice::new(CostModel::default().without_jitter()).unwrap();

    let mut a = prepared(w, len, seed);
    let ctx = model::StepContext {
        token: 0,
        len,
        input: a.x,
    };
    model::forward_eager(w, &mut a, &ctx, &mut dev, StreamId::Replay).unwrap();

    let mut b = prepared(w, len, seed);
    let mut engine = CaptureEngine::new(model::graph_safe_buffers(w, &b));
    let plan = model::static_kernel_plan(w, len, &b).unwrap();
    let plan_len = plan.len();
    let g = engine.capture_plan(len, plan).unwrap();
    let before = dev.counters().dispatches;
    let cached = b.kv.cur_len();
    let mut mem = DeviceMemory {
        weights: w,
        workspace: &mut b,
    };
    graph::replay(&g, &mut dev, StreamId::Replay, &mut mem, cached).unwrap();
    let replay_dispatches = dev.counters().dispatches - before;

    ReplayCase {
        eager_logits: a.logits().data().to_vec(),
        replay_logits: b.logits().data().to_vec(),
        eager_x: a.tensor(a.x).data().to_vec(),
        replay_x: b.tensor(b.x).data().to_vec(),
        plan_len,
        replay_dispatches,
    }
}

pub fn bits(xs: &[f32]) -> Vec<u32> {
    xs.iter().map(|x| x.to_bits()).collect()
}

/// Trivial one-kernel graphs for arbitrary lengths, for cache tests.
pub struct GraphFactory {
    store: BufferStore,
    engine: CaptureEngine,
}

impl GraphFactory {
    pub fn new() -> Self {
        let mut store = BufferStore::new();
        store.alloc(&[1, 1]);
        let engine = CaptureEngine::new(store.ids().iter().copied());
        Self { store, engine }
    }

    pub fn graph(&mut self, len: usize) -> Arc<ExecGraph> {
        let id = self.store.ids()[0];
        let inv =
            KernelInvocation::bind(&self.store, StaticOp::ResidualAdd, vec![id, id], vec![id])
                .unwrap();
        Arc::new(self.engine.capture_plan(len, vec![inv]).unwrap())
    }
}

/// Brute-force least-used cache: linear scan for the minimal
/// `(use_count, insert_seq)` entry.
#[derive(Default)]
pub struct ReferenceCache {
    pub capacity: usize,
    entries: Vec<(usize, u64, u64)>,
    seq: u64,
}

impl ReferenceCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Default::default()
        }
    }

    pub fn lookup(&mut self, key: usize) -> bool {
        match self.entries.iter_mut().find(|e| e.0 == key) {
            Some(e) => {
                e.1 += 1;
                true
            }
            None => false,
        }
    }

    pub fn insert(&mut self, key: usize) -> Option<usize> {
        self.seq += 1;
        if let Some(e) = self.entries.iter_mut().find(|e| e.0 == key) {
            e.1 = 0;
            e.2 = self.seq;
            return None;
        }
        let mut evicted = None;
        if self.entries.len() == self.capacity {
            let mut best = 0;
            for i in 1..self.entries.len() {
                let (e, b) = (self.entries[i], self.entries[best]);
                if e.1 < b.1 || (e.1 == b.1 && e.2 < b.2) {
                    best = i;
                }
            }
            evicted = Some(self.entries.remove(best).0);
        }
        self.entries.push((key, 0, self.seq));
        evicted
    }

    pub fn keys(&self) -> Vec<usize> {
        let mut k: Vec<usize> = self.entries.iter().map(|e| e.0).collect();
        k.sort_unstable();
        k
    }
}

/// Duration of a trace record recomputed from the cost model, assuming no
/// jitter.
pub fn expected_duration(cost: &CostModel, r: &TraceRecord) -> f64 {
    let compute = cost.alpha_us_per_mflop * r.flops as f64 / 1e6;
    match r.kind {
        ItemKind::Kernel => cost.host_dispatch_us + cost.launch_overhead_us + compute,
        ItemKind::FusedBlock => {
            cost.host_dispatch_us + r.kernels as f64 * cost.launch_overhead_us + compute
        }
        ItemKind::Replay => cost.launch_overhead_us + compute,
        ItemKind::Capture => cost.capture_cost_us_per_kernel * r.kernels as f64,
    }
}

/// Token completion times rebuilt from the replay stream alone: the stream
/// never waits, so each item starts where the previous one ended. A token
/// completes when the post-step block that sampled it finishes.
pub fn token_times(cost: &CostModel, tl: &Timeline) -> Vec<f64> {
    let mut clock = 0.0;
    let mut sampled = false;
    let mut out = Vec::new();
    for r in tl.on(StreamId::Replay) {
        clock += expected_duration(cost, r);
        if r.id.contains("sample_token") {
            sampled = true;
        }
        if sampled && r.id.contains("kv_append") {
            out.push(clock);
            sampled = false;
        }
    }
    out
}

/// Analytic flops of one step at length `len`, from the model shape alone.
pub fn step_flops(cfg: &ModelConfig, len: usize) -> Vec<u64> {
    let (d, h, dh, v) = (
        cfg.d_model as u64,
        cfg.n_heads as u64,
        cfg.head_dim() as u64,
        cfg.vocab as u64,
    );
    let l = len as u64;
    let mut k = Vec::new();
    for _ in 0..cfg.n_layers {
        k.extend([8 * d, 2 * d * d, 2 * d * d, 2 * d * d]);
        k.push(h * (4 * l * dh + 3 * l + dh));
        k.extend([2 * d * d, d, 8 * d, 2 * d * 4 * d, 2 * 4 * d * d, d]);
    }
    k.extend([8 * d, 2 * d * v]);
    k
}

/// Eager TTFT from first principles: every kernel pays host dispatch, launch
/// and compute; steps `1..=p` each run position extension, the static plan
/// and a KV append, the last prompt step and the first decode step also
/// sample.
pub fn eager_ttft(cost: &CostModel, cfg: &ModelConfig, p: usize) -> f64 {
    let k = |flops: u64| {
        cost.host_dispatch_us
            + cost.launch_overhead_us
            + cost.alpha_us_per_mflop * flops as f64 / 1e6
    };
    let mut t = 0.0;
    for len in 1..=p + 1 {
        t += k(cfg.d_model as u64);
        for f in step_flops(cfg, len) {
            t += k(f);
        }
        if len >= p {
            t += k(cfg.vocab as u64);
        }
        t += k(0);
    }
    t
}
