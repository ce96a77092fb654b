//! A toy decoder-only transformer: seeded weights, a shared activation
//! workspace, and the per-length static kernel plan.
//!
//! Each decode step at sequence length `ℓ` (the current token sits at
//! position `ℓ - 1`, with `ℓ - 1` positions already cached) runs:
//!
//! 1. dynamic preprocessing: `extend_positions` writes token + position
//!    embedding into the residual stream `x`;
//! 2. the static plan, per layer:
//!    `layernorm, matmul(Wq), matmul(Wk), matmul(Wv), attention,
//!    matmul(Wo), residual_add, layernorm, matmul(W1), matmul(W2),
//!    residual_add` ([`KERNELS_PER_LAYER`] = 11), then a final `layernorm`
//!    and the output-head `matmul`;
//! 3. dynamic postprocessing: `sample_token` (when a token is needed) and
//!    `kv_append`, which stores every layer's fresh key/value row.
//!
//! The attention kernel reads the cached prefix plus the fresh key/value rows
//! from the workspace, so the whole static segment is capturable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::device::{DispatchMode, StreamId, VirtualDevice};
use crate::error::{Error, Result};
use crate::kernels::{self, BufferView, KernelInvocation, KvCache, Memory, Sampler, StaticOp};
use crate::tensor::{BufferId, BufferStore, KernelSpec, Tensor};

pub const KERNELS_PER_LAYER: usize = 11;
pub const LAYERNORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            vocab: 256,
            max_seq: 600,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Kernels in one static plan; independent of sequence length.
    pub fn plan_len(&self) -> usize {
        self.n_layers * KERNELS_PER_LAYER + 2
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gamma: BufferId,
    pub ln1_beta: BufferId,
    pub wq: BufferId,
    pub wk: BufferId,
    pub wv: BufferId,
    pub wo: BufferId,
    pub ln2_gamma: BufferId,
    pub ln2_beta: BufferId,
    pub w1: BufferId,
    pub w2: BufferId,
}

#[derive(Debug, Clone)]
pub struct Weights {
    config: ModelConfig,
    store: BufferStore,
    pub token_embedding: BufferId,
    pub position_embedding: BufferId,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: BufferId,
    pub final_beta: BufferId,
    pub head: BufferId,
}

impl Weights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &BufferStore {
        &self.store
    }

    pub fn tensor(&self, id: BufferId) -> &Tensor {
        self.store.get(id).expect("weight buffer")
    }
}

/// Fills every weight uniformly from `[-0.1, 0.1]` with a generator seeded
/// by `config.seed`, in a fixed allocation order.
pub fn init_model(config: ModelConfig) -> Result<Weights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = BufferStore::new();
    let mut param = |shape: &[usize]| {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-0.1f32..=0.1)).collect();
        store.insert(Tensor::from_vec(shape, data).expect("weight shape"))
    };
    let (d, ff) = (config.d_model, config.d_ff());
    let token_embedding = param(&[config.vocab, d]);
    let position_embedding = param(&[config.max_seq, d]);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            ln1_gamma: param(&[d]),
            ln1_beta: param(&[d]),
            wq: param(&[d, d]),
            wk: param(&[d, d]),
            wv: param(&[d, d]),
            wo: param(&[d, d]),
            ln2_gamma: param(&[d]),
            ln2_beta: param(&[d]),
            w1: param(&[d, ff]),
            w2: param(&[ff, d]),
        })
        .collect();
    let final_gamma = param(&[d]);
    let final_beta = param(&[d]);
    let head = param(&[d, config.vocab]);
    Ok(Weights {
        config,
        store,
        token_embedding,
        position_embedding,
        layers,
        final_gamma,
        final_beta,
        head,
    })
}

/// The fixed pool of activation buffers shared by every plan and graph,
/// plus the KV cache those plans read.
#[derive(Debug, Clone)]
pub struct Workspace {
    store: BufferStore,
    pub kv: KvCache,
    pub x: BufferId,
    pub normed: BufferId,
    pub q: BufferId,
    pub k: Vec<BufferId>,
    pub v: Vec<BufferId>,
    pub attn: BufferId,
    pub proj: BufferId,
    pub mlp_hidden: BufferId,
    pub mlp_out: BufferId,
    pub logits: BufferId,
}

impl Workspace {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = BufferStore::new();
        let x = store.alloc(&[1, d]);
        let normed = store.alloc(&[1, d]);
        let q = store.alloc(&[1, d]);
        let k = (0..config.n_layers).map(|_| store.alloc(&[1, d])).collect();
        let v = (0..config.n_layers).map(|_| store.alloc(&[1, d])).collect();
        let attn = store.alloc(&[1, d]);
        let proj = store.alloc(&[1, d]);
        let mlp_hidden = store.alloc(&[1, config.d_ff()]);
        let mlp_out = store.alloc(&[1, d]);
        let logits = store.alloc(&[1, config.vocab]);
        Ok(Self {
            store,
            kv: KvCache::new(
                config.n_layers,
                config.max_seq,
                config.n_heads,
                config.head_dim(),
            ),
            x,
            normed,
            q,
            k,
            v,
            attn,
            proj,
            mlp_hidden,
            mlp_out,
            logits,
        })
    }

    pub fn store(&self) -> &BufferStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut BufferStore {
        &mut self.store
    }

    pub fn tensor(&self, id: BufferId) -> &Tensor {
        self.store.get(id).expect("workspace buffer")
    }

    /// Number of buffers in the pool, KV storage included.
    pub fn pool_buffers(&self) -> usize {
        self.store.len() + 2 * self.kv.n_layers()
    }

    pub fn pool_bytes(&self) -> usize {
        self.store.total_bytes() + self.kv.total_bytes()
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = BufferId> + '_ {
        self.store.ids().iter().copied().chain(self.kv.buffer_ids())
    }

    pub fn logits(&self) -> &Tensor {
        self.tensor(self.logits)
    }
}

/// Everything a static kernel can bind: weights (read-only), the workspace
/// pool and the KV storage.
pub struct DeviceMemory<'a> {
    pub weights: &'a Weights,
    pub workspace: &'a mut Workspace,
}

impl BufferView for DeviceMemory<'_> {
    fn get(&self, id: BufferId) -> Option<&Tensor> {
        self.workspace
            .store
            .get(id)
            .or_else(|| self.weights.store.get(id))
            .or_else(|| self.workspace.kv.find(id))
    }
}

impl Memory for DeviceMemory<'_> {
    fn take(&mut self, id: BufferId) -> Option<Tensor> {
        self.workspace.store.take(id)
    }

    fn restore(&mut self, t: Tensor) {
        self.workspace.store.restore(t)
    }
}

struct MemoryView<'a> {
    weights: &'a Weights,
    workspace: &'a Workspace,
}

impl BufferView for MemoryView<'_> {
    fn get(&self, id: BufferId) -> Option<&Tensor> {
        self.workspace
            .store
            .get(id)
            .or_else(|| self.weights.store.get(id))
            .or_else(|| self.workspace.kv.find(id))
    }
}

/// Buffers a captured graph may legally bind.
pub fn graph_safe_buffers<'a>(
    weights: &'a Weights,
    workspace: &'a Workspace,
) -> impl Iterator<Item = BufferId> + 'a {
    weights
        .store
        .ids()
        .iter()
        .copied()
        .chain(workspace.buffer_ids())
}

/// Input of one decode step. After preprocessing, `input` holds the token's
/// embedded hidden state and `len == kv.cur_len() + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub token: usize,
    pub len: usize,
    pub input: BufferId,
}

fn check_len(len: usize, max: usize) -> Result<()> {
    if len == 0 || len > max {
        Err(Error::LengthOutOfRange { len, max })
    } else {
        Ok(())
    }
}

/// The ordered static kernel sequence for one decode step at length `len`.
pub fn static_kernel_plan(
    weights: &Weights,
    len: usize,
    workspace: &Workspace,
) -> Result<Vec<KernelInvocation>> {
    let cfg = &weights.config;
    check_len(len, cfg.max_seq)?;
    let view = MemoryView { weights, workspace };
    let ws = workspace;
    let bind =
        |op, ins: Vec<BufferId>, outs: Vec<BufferId>| KernelInvocation::bind(&view, op, ins, outs);
    let ln = StaticOp::LayerNorm { eps: LAYERNORM_EPS };
    let attn = StaticOp::StepAttention {
        len,
        n_heads: cfg.n_heads,
        head_dim: cfg.head_dim(),
        scale: 1.0 / (cfg.head_dim() as f32).sqrt(),
    };
    let mut plan = Vec::with_capacity(cfg.plan_len());
    for (l, lw) in weights.layers.iter().enumerate() {
        let (ck, cv) = (ws.kv.keys(l).id(), ws.kv.values(l).id());
        plan.push(bind(
            ln.clone(),
            vec![ws.x, lw.ln1_gamma, lw.ln1_beta],
            vec![ws.normed],
        )?);
        plan.push(bind(StaticOp::Matmul, vec![ws.normed, lw.wq], vec![ws.q])?);
        plan.push(bind(
            StaticOp::Matmul,
            vec![ws.normed, lw.wk],
            vec![ws.k[l]],
        )?);
        plan.push(bind(
            StaticOp::Matmul,
            vec![ws.normed, lw.wv],
            vec![ws.v[l]],
        )?);
        plan.push(bind(
            attn.clone(),
            vec![ws.q, ck, cv, ws.k[l], ws.v[l]],
            vec![ws.attn],
        )?);
        plan.push(bind(StaticOp::Matmul, vec![ws.attn, lw.wo], vec![ws.proj])?);
        plan.push(bind(
            StaticOp::ResidualAdd,
            vec![ws.x, ws.proj],
            vec![ws.x],
        )?);
        plan.push(bind(
            ln.clone(),
            vec![ws.x, lw.ln2_gamma, lw.ln2_beta],
            vec![ws.normed],
        )?);
        plan.push(bind(
            StaticOp::Matmul,
            vec![ws.normed, lw.w1],
            vec![ws.mlp_hidden],
        )?);
        plan.push(bind(
            StaticOp::Matmul,
            vec![ws.mlp_hidden, lw.w2],
            vec![ws.mlp_out],
        )?);
        plan.push(bind(
            StaticOp::ResidualAdd,
            vec![ws.x, ws.mlp_out],
            vec![ws.x],
        )?);
    }
    plan.push(bind(
        ln,
        vec![ws.x, weights.final_gamma, weights.final_beta],
        vec![ws.normed],
    )?);
    plan.push(bind(
        StaticOp::Matmul,
        vec![ws.normed, weights.head],
        vec![ws.logits],
    )?);
    Ok(plan)
}

/// Writes the embedded `token` for the next position into `x`.
pub fn preprocess(
    weights: &Weights,
    workspace: &mut Workspace,
    token: usize,
) -> Result<(StepContext, KernelSpec)> {
    let len = workspace.kv.cur_len() + 1;
    check_len(len, weights.config.max_seq)?;
    let x = workspace.x;
    let mut out = workspace.store.take(x).ok_or(Error::UnknownBuffer(x))?;
    let res = kernels::extend_positions(
        token,
        len - 1,
        weights.tensor(weights.token_embedding),
        weights.tensor(weights.position_embedding),
        &mut out,
    );
    workspace.store.restore(out);
    Ok((
        StepContext {
            token,
            len,
            input: x,
        },
        res?,
    ))
}

fn check_ctx(ctx: &StepContext, workspace: &Workspace) -> Result<()> {
    if ctx.len != workspace.kv.cur_len() + 1 {
        return Err(Error::WrongLength {
            graph_len: ctx.len,
            cached: workspace.kv.cur_len(),
        });
    }
    Ok(())
}

/// Runs the static plan kernel by kernel, submitting each individually.
/// Returns the logits buffer.
pub fn forward_eager(
    weights: &Weights,
    workspace: &mut Workspace,
    ctx: &StepContext,
    device: &mut VirtualDevice,
    stream: StreamId,
) -> Result<BufferId> {
    check_ctx(ctx, workspace)?;
    let plan = static_kernel_plan(weights, ctx.len, workspace)?;
    run_plan_eager(&plan, weights, workspace, device, stream)?;
    Ok(workspace.logits)
}

pub(crate) fn run_plan_eager(
    plan: &[KernelInvocation],
    weights: &Weights,
    workspace: &mut Workspace,
    device: &mut VirtualDevice,
    stream: StreamId,
) -> Result<()> {
    let mut mem = DeviceMemory { weights, workspace };
    for inv in plan {
        inv.execute(&mut mem)?;
        device.submit_kernel(stream, &inv.spec, DispatchMode::Eager)?;
    }
    Ok(())
}

pub fn sample_logits(workspace: &Workspace, sampler: &mut Sampler) -> Result<(usize, KernelSpec)> {
    kernels::sample_token(workspace.logits(), sampler)
}

/// Appends every layer's fresh key/value row to the cache.
pub fn append_step_kv(workspace: &mut Workspace) -> Result<KernelSpec> {
    let Workspace {
        store, kv, k, v, ..
    } = workspace;
    let ks: Vec<&Tensor> = k
        .iter()
        .map(|id| store.get(*id).expect("k buffer"))
        .collect();
    let vs: Vec<&Tensor> = v
        .iter()
        .map(|id| store.get(*id).expect("v buffer"))
        .collect();
    kernels::kv_append(kv, &ks, &vs)
}

/// Eager token-by-token prefill. Leaves `kv.cur_len() == prompt.len()` and
/// returns the context for the next step, whose token is sampled from the
/// last prompt position's logits.
pub fn prefill(
    weights: &Weights,
    workspace: &mut Workspace,
    prompt: &[usize],
    device: &mut VirtualDevice,
    sampler: &mut Sampler,
) -> Result<StepContext> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let max_seq = weights.config.max_seq;
    if workspace.kv.cur_len() + prompt.len() > max_seq {
        return Err(Error::PromptTooLong {
            prompt: prompt.len(),
            gen: 0,
            max_seq,
        });
    }
    let mut next = 0;
    for (i, &tok) in prompt.iter().enumerate() {
        let (ctx, spec) = preprocess(weights, workspace, tok)?;
        device.submit_kernel(StreamId::Replay, &spec, DispatchMode::Eager)?;
        forward_eager(weights, workspace, &ctx, device, StreamId::Replay)?;
        if i + 1 == prompt.len() {
            let (t, spec) = sample_logits(workspace, sampler)?;
            device.submit_kernel(StreamId::Replay, &spec, DispatchMode::Eager)?;
            next = t;
        }
        let spec = append_step_kv(workspace)?;
        device.submit_kernel(StreamId::Replay, &spec, DispatchMode::Eager)?;
    }
    Ok(StepContext {
        token: next,
        len: workspace.kv.cur_len() + 1,
        input: workspace.x,
    })
}

/// One eager decode step from `ctx`; returns the sampled token and the
/// context for the following step.
pub fn decode_step_eager(
    weights: &Weights,
    workspace: &mut Workspace,
    ctx: StepContext,
    device: &mut VirtualDevice,
    sampler: &mut Sampler,
) -> Result<(usize, StepContext)> {
    let (ctx, spec) = preprocess(weights, workspace, ctx.token)?;
    device.submit_kernel(StreamId::Replay, &spec, DispatchMode::Eager)?;
    forward_eager(weights, workspace, &ctx, device, StreamId::Replay)?;
    let (t, spec) = sample_logits(workspace, sampler)?;
    device.submit_kernel(StreamId::Replay, &spec, DispatchMode::Eager)?;
    let spec = append_step_kv(workspace)?;
    device.submit_kernel(StreamId::Replay, &spec, DispatchMode::Eager)?;
    Ok((
        t,
        StepContext {
            token: t,
            len: workspace.kv.cur_len() + 1,
            input: workspace.x,
        },
    ))
}
