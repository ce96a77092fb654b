//! Deterministic CPU kernels for a decoder-only transformer.
//!
//! Every kernel returns the [`KernelSpec`] describing the dispatch it
//! represents. Static kernels can additionally be bound into a
//! [`KernelInvocation`], which is what capture records and replay executes.
//!
//! Flop conventions (per call):
//!
//! | kernel            | flops                                  |
//! |-------------------|----------------------------------------|
//! | matmul            | `2·m·k·n`                              |
//! | layernorm         | `8·n·d`                                |
//! | attention         | `h·(4·len·dh + 3·len + dh)`            |
//! | residual_add      | element count                          |
//! | embedding_lookup  | 0                                      |
//! | extend_positions  | `d`                                    |
//! | kv_append         | 0                                      |
//! | sample_token      | `vocab`                                |

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BufferId, BufferStore, KernelSpec, OpClass, Tensor};

pub const MATMUL: &str = "matmul";
pub const LAYERNORM: &str = "layernorm";
pub const ATTENTION: &str = "attention";
pub const RESIDUAL_ADD: &str = "residual_add";
pub const EMBEDDING_LOOKUP: &str = "embedding_lookup";
pub const EXTEND_POSITIONS: &str = "extend_positions";
pub const KV_APPEND: &str = "kv_append";
pub const SAMPLE_TOKEN: &str = "sample_token";

pub const DYNAMIC_KERNELS: [&str; 3] = [EXTEND_POSITIONS, KV_APPEND, SAMPLE_TOKEN];
pub const STATIC_KERNELS: [&str; 5] =
    [MATMUL, LAYERNORM, ATTENTION, RESIDUAL_ADD, EMBEDDING_LOOKUP];

/// Classification is a property of the operation. Unknown names are treated
/// as dynamic, which keeps them out of captured graphs.
pub fn op_class_of(name: &str) -> OpClass {
    if STATIC_KERNELS.contains(&name) {
        OpClass::Static
    } else {
        OpClass::Dynamic
    }
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

pub fn layernorm_flops(n: usize, d: usize) -> u64 {
    8 * (n * d) as u64
}

pub fn attention_flops(len: usize, n_heads: usize, head_dim: usize) -> u64 {
    (n_heads * (4 * len * head_dim + 3 * len + head_dim)) as u64
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, k] => Ok((*m, *k)),
        s => Err(mismatch(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(0.0);
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out = a · b` for `a: [m,k]`, `b: [k,n]`, `out: [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor, out: &mut Tensor) -> Result<KernelSpec> {
    let (m, k) = matrix_dims(a, MATMUL)?;
    let (k2, n) = matrix_dims(b, MATMUL)?;
    if k != k2 || out.shape() != [m, n] {
        return Err(mismatch(
            MATMUL,
            format!("{:?} · {:?} -> {:?}", a.shape(), b.shape(), out.shape()),
        ));
    }
    matmul_into(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(KernelSpec::new(
        MATMUL,
        vec![a.id(), b.id()],
        vec![out.id()],
        matmul_flops(m, k, n),
    ))
}

fn layernorm_into(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32], d: usize) {
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let denom = (var + eps).sqrt();
        for (((o, &v), &g), &b) in or.iter_mut().zip(xr).zip(gamma).zip(beta) {
            *o = (v - mean) / denom * g + b;
        }
    }
}

/// Row-wise layer normalization with population variance; `eps` sits inside
/// the square root.
pub fn layernorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
    out: &mut Tensor,
) -> Result<KernelSpec> {
    let (n, d) = matrix_dims(x, LAYERNORM)?;
    if gamma.shape() != [d] || beta.shape() != [d] || out.shape() != x.shape() {
        return Err(mismatch(
            LAYERNORM,
            format!(
                "x {:?}, gamma {:?}, beta {:?}, out {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape(),
                out.shape()
            ),
        ));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(mismatch(
            LAYERNORM,
            format!("eps must be positive, got {eps}"),
        ));
    }
    layernorm_into(x.data(), gamma.data(), beta.data(), eps, out.data_mut(), d);
    Ok(KernelSpec::new(
        LAYERNORM,
        vec![x.id(), gamma.id(), beta.id()],
        vec![out.id()],
        layernorm_flops(n, d),
    ))
}

/// Single-query multi-head attention over a sequence of key/value rows.
/// Each row is `[n_heads * head_dim]`. Scores are max-subtracted before
/// exponentiation.
fn attend<'a>(
    q: &[f32],
    rows: impl Iterator<Item = (&'a [f32], &'a [f32])> + Clone,
    n_heads: usize,
    head_dim: usize,
    scale: f32,
    out: &mut [f32],
) {
    let mut scores = Vec::new();
    for h in 0..n_heads {
        let span = h * head_dim..(h + 1) * head_dim;
        let qh = &q[span.clone()];
        scores.clear();
        scores.extend(rows.clone().map(|(k, _)| {
            let dot: f32 = qh.iter().zip(&k[span.clone()]).map(|(a, b)| a * b).sum();
            dot * scale
        }));
        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        let oh = &mut out[span.clone()];
        oh.fill(0.0);
        for (w, (_, v)) in scores.iter().zip(rows.clone()) {
            for (o, &vv) in oh.iter_mut().zip(&v[span.clone()]) {
                *o += w * vv;
            }
        }
        for o in oh.iter_mut() {
            *o /= z;
        }
    }
}

/// Attention of one query over the valid prefix `[0, cur_len)` of one layer
/// of the cache.
pub fn attention(
    q: &Tensor,
    kv: &KvCache,
    layer: usize,
    scale: f32,
    out: &mut Tensor,
) -> Result<KernelSpec> {
    let width = kv.n_heads * kv.head_dim;
    if q.len() != width || out.len() != width || layer >= kv.n_layers() {
        return Err(mismatch(
            ATTENTION,
            format!(
                "q {:?}, out {:?}, cache heads {}x{}, layer {layer}",
                q.shape(),
                out.shape(),
                kv.n_heads,
                kv.head_dim
            ),
        ));
    }
    if kv.cur_len == 0 {
        return Err(Error::EmptyCache);
    }
    let (keys, values) = (&kv.keys[layer], &kv.values[layer]);
    let rows = (0..kv.cur_len).map(|p| (keys.row(p), values.row(p)));
    attend(
        q.data(),
        rows,
        kv.n_heads,
        kv.head_dim,
        scale,
        out.data_mut(),
    );
    Ok(KernelSpec::new(
        ATTENTION,
        vec![q.id(), keys.id(), values.id()],
        vec![out.id()],
        attention_flops(kv.cur_len, kv.n_heads, kv.head_dim),
    ))
}

/// `out[i] = table[token_ids[i]]`.
pub fn embedding_lookup(
    token_ids: &[usize],
    table: &Tensor,
    out: &mut Tensor,
) -> Result<KernelSpec> {
    let (vocab, d) = matrix_dims(table, EMBEDDING_LOOKUP)?;
    if out.shape() != [token_ids.len(), d] {
        return Err(mismatch(
            EMBEDDING_LOOKUP,
            format!("{} ids into {:?}", token_ids.len(), out.shape()),
        ));
    }
    if let Some(&id) = token_ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::TokenOutOfRange { id, vocab });
    }
    let rows: Vec<f32> = token_ids
        .iter()
        .flat_map(|&t| table.row(t).to_vec())
        .collect();
    out.data_mut().copy_from_slice(&rows);
    Ok(KernelSpec::new(
        EMBEDDING_LOOKUP,
        vec![table.id()],
        vec![out.id()],
        0,
    ))
}

/// Token embedding plus the position-table row for `position`. This is the
/// length-dependent preprocessing that runs outside captured graphs.
pub fn extend_positions(
    token: usize,
    position: usize,
    tokens: &Tensor,
    positions: &Tensor,
    out: &mut Tensor,
) -> Result<KernelSpec> {
    let (vocab, d) = matrix_dims(tokens, EXTEND_POSITIONS)?;
    let (max_seq, d2) = matrix_dims(positions, EXTEND_POSITIONS)?;
    if d != d2 || out.len() != d {
        return Err(mismatch(
            EXTEND_POSITIONS,
            format!(
                "tokens {:?}, positions {:?}, out {:?}",
                tokens.shape(),
                positions.shape(),
                out.shape()
            ),
        ));
    }
    if token >= vocab {
        return Err(Error::TokenOutOfRange { id: token, vocab });
    }
    if position >= max_seq {
        return Err(Error::LengthOutOfRange {
            len: position + 1,
            max: max_seq,
        });
    }
    for ((o, &t), &p) in out
        .data_mut()
        .iter_mut()
        .zip(tokens.row(token))
        .zip(positions.row(position))
    {
        *o = t + p;
    }
    Ok(KernelSpec::new(
        EXTEND_POSITIONS,
        vec![tokens.id(), positions.id()],
        vec![out.id()],
        d as u64,
    ))
}

/// Per-layer key/value storage of shape `[max_seq, n_heads, head_dim]`.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
    cur_len: usize,
    max_seq: usize,
    n_heads: usize,
    head_dim: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, max_seq: usize, n_heads: usize, head_dim: usize) -> Self {
        let shape = [max_seq, n_heads, head_dim];
        Self {
            keys: (0..n_layers).map(|_| Tensor::zeros(&shape)).collect(),
            values: (0..n_layers).map(|_| Tensor::zeros(&shape)).collect(),
            cur_len: 0,
            max_seq,
            n_heads,
            head_dim,
        }
    }

    pub fn cur_len(&self) -> usize {
        self.cur_len
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self, layer: usize) -> &Tensor {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &Tensor {
        &self.values[layer]
    }

    /// Forgets all positions. Stale rows stay in memory but are never read.
    pub fn reset(&mut self) {
        self.cur_len = 0;
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = BufferId> + '_ {
        self.keys.iter().chain(self.values.iter()).map(Tensor::id)
    }

    pub fn total_bytes(&self) -> usize {
        self.keys
            .iter()
            .chain(&self.values)
            .map(Tensor::size_bytes)
            .sum()
    }

    pub(crate) fn find(&self, id: BufferId) -> Option<&Tensor> {
        self.keys.iter().chain(&self.values).find(|t| t.id() == id)
    }

    /// Valid prefix `[0, cur_len)` of one layer, as (keys, values) flat slices.
    pub fn valid(&self, layer: usize) -> (&[f32], &[f32]) {
        let w = self.n_heads * self.head_dim;
        (
            &self.keys[layer].data()[..self.cur_len * w],
            &self.values[layer].data()[..self.cur_len * w],
        )
    }
}

/// Writes one position for every layer at `cur_len` and advances it.
/// `k_new[l]` / `v_new[l]` hold layer `l`'s key and value rows.
pub fn kv_append(kv: &mut KvCache, k_new: &[&Tensor], v_new: &[&Tensor]) -> Result<KernelSpec> {
    let w = kv.n_heads * kv.head_dim;
    if k_new.len() != kv.n_layers()
        || v_new.len() != kv.n_layers()
        || k_new.iter().chain(v_new).any(|t| t.len() != w)
    {
        return Err(mismatch(
            KV_APPEND,
            format!("expected {} layers of width {w}", kv.n_layers()),
        ));
    }
    if kv.cur_len == kv.max_seq {
        return Err(Error::CacheFull {
            max_seq: kv.max_seq,
        });
    }
    let pos = kv.cur_len;
    for (dst, src) in kv.keys.iter_mut().zip(k_new) {
        dst.data_mut()[pos * w..(pos + 1) * w].copy_from_slice(src.data());
    }
    for (dst, src) in kv.values.iter_mut().zip(v_new) {
        dst.data_mut()[pos * w..(pos + 1) * w].copy_from_slice(src.data());
    }
    kv.cur_len += 1;
    let inputs = k_new.iter().chain(v_new).map(|t| t.id()).collect();
    let outputs = kv.buffer_ids().collect();
    Ok(KernelSpec::new(KV_APPEND, inputs, outputs, 0))
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Sampler {
    Greedy,
    Temperature { t: f32, rng: ChaCha8Rng },
}

/// Picks the next token. Greedy breaks ties toward the lowest index;
/// temperature sampling draws from `softmax(logits / t)` with the sampler's
/// own generator.
pub fn sample_token(logits: &Tensor, sampler: &mut Sampler) -> Result<(usize, KernelSpec)> {
    let vals = logits.data();
    if vals.is_empty() {
        return Err(mismatch(SAMPLE_TOKEN, "empty logits".into()));
    }
    let token = match sampler {
        Sampler::Greedy => {
            let mut best = 0;
            for (i, &v) in vals.iter().enumerate() {
                if v > vals[best] {
                    best = i;
                }
            }
            best
        }
        Sampler::Temperature { t, rng } => {
            if t.is_nan() || *t <= 0.0 {
                return Err(mismatch(
                    SAMPLE_TOKEN,
                    format!("temperature must be positive, got {t}"),
                ));
            }
            let t = *t as f64;
            let max = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let weights: Vec<f64> = vals.iter().map(|&v| ((v as f64 - max) / t).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        }
    };
    let spec = KernelSpec::new(SAMPLE_TOKEN, vec![logits.id()], vec![], vals.len() as u64);
    Ok((token, spec))
}

/// Read access to every buffer a static kernel may bind.
pub trait BufferView {
    fn get(&self, id: BufferId) -> Option<&Tensor>;
}

/// Buffers a kernel can also write. Outputs are taken out while the kernel
/// runs and restored afterwards.
pub trait Memory: BufferView {
    fn take(&mut self, id: BufferId) -> Option<Tensor>;
    fn restore(&mut self, t: Tensor);
}

impl BufferView for BufferStore {
    fn get(&self, id: BufferId) -> Option<&Tensor> {
        BufferStore::get(self, id)
    }
}

impl Memory for BufferStore {
    fn take(&mut self, id: BufferId) -> Option<Tensor> {
        BufferStore::take(self, id)
    }
    fn restore(&mut self, t: Tensor) {
        BufferStore::restore(self, t)
    }
}

/// The executable body of a static kernel, with its non-buffer parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum StaticOp {
    /// inputs `[a, b]`, output `[out]`.
    Matmul,
    /// inputs `[x, gamma, beta]`, output `[out]`.
    LayerNorm { eps: f32 },
    /// Decode-step attention over `len` positions: the first `len - 1` come
    /// from the cache, the last is the current token's fresh key/value.
    /// inputs `[q, cache_k, cache_v, k_new, v_new]`, output `[out]`.
    StepAttention {
        len: usize,
        n_heads: usize,
        head_dim: usize,
        scale: f32,
    },
    /// inputs `[acc, delta]`, output `[acc]`.
    ResidualAdd,
}

/// A static kernel bound to concrete buffers, with the shapes those buffers
/// had at binding time.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelInvocation {
    pub spec: KernelSpec,
    pub op: StaticOp,
    pub shapes: Vec<(BufferId, Vec<usize>)>,
}

fn lookup(mem: &(impl BufferView + ?Sized), id: BufferId) -> Result<&Tensor> {
    mem.get(id).ok_or(Error::UnknownBuffer(id))
}

impl KernelInvocation {
    /// Binds `op` to buffers, freezing their current shapes. The spec's flop
    /// count is derived from the op and those shapes.
    pub fn bind(
        mem: &dyn BufferView,
        op: StaticOp,
        inputs: Vec<BufferId>,
        outputs: Vec<BufferId>,
    ) -> Result<Self> {
        let mut shapes = Vec::new();
        for id in inputs.iter().chain(&outputs) {
            if !shapes.iter().any(|(b, _)| b == id) {
                shapes.push((*id, lookup(mem, *id)?.shape().to_vec()));
            }
        }
        let shape_of = |i: usize| &shapes.iter().find(|(b, _)| *b == inputs[i]).unwrap().1;
        let (name, flops) = match &op {
            StaticOp::Matmul => {
                let (a, b) = (shape_of(0), shape_of(1));
                if a.len() != 2 || b.len() != 2 {
                    return Err(mismatch(MATMUL, format!("{a:?} · {b:?}")));
                }
                (MATMUL, matmul_flops(a[0], a[1], b[1]))
            }
            StaticOp::LayerNorm { .. } => {
                let x = shape_of(0);
                (LAYERNORM, layernorm_flops(x[0], x[1..].iter().product()))
            }
            StaticOp::StepAttention {
                len,
                n_heads,
                head_dim,
                ..
            } => (ATTENTION, attention_flops(*len, *n_heads, *head_dim)),
            StaticOp::ResidualAdd => (RESIDUAL_ADD, shape_of(0).iter().product::<usize>() as u64),
        };
        Ok(Self {
            spec: KernelSpec::new(name, inputs, outputs, flops),
            op,
            shapes,
        })
    }

    /// Runs the kernel's math against whatever the bound buffers hold now.
    pub fn execute(&self, mem: &mut dyn Memory) -> Result<()> {
        let ins = &self.spec.input_buffers;
        let out_id = self.spec.output_buffers[0];
        if let StaticOp::ResidualAdd = self.op {
            let mut acc = mem.take(out_id).ok_or(Error::UnknownBuffer(out_id))?;
            let res = match lookup(mem, ins[1]) {
                Ok(delta) if delta.len() == acc.len() => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                    Ok(())
                }
                Ok(delta) => Err(mismatch(
                    RESIDUAL_ADD,
                    format!("{:?} += {:?}", acc.shape(), delta.shape()),
                )),
                Err(e) => Err(e),
            };
            mem.restore(acc);
            return res;
        }
        let mut out = mem.take(out_id).ok_or(Error::UnknownBuffer(out_id))?;
        let res = self.run_into(mem, &mut out);
        mem.restore(out);
        res
    }

    fn run_into(&self, mem: &dyn Memory, out: &mut Tensor) -> Result<()> {
        let ins = &self.spec.input_buffers;
        match &self.op {
            StaticOp::Matmul => {
                let (a, b) = (lookup(mem, ins[0])?, lookup(mem, ins[1])?);
                let (m, k) = matrix_dims(a, MATMUL)?;
                let n = b.shape()[1];
                if b.shape()[0] != k || out.len() != m * n {
                    return Err(mismatch(
                        MATMUL,
                        format!("{:?} · {:?}", a.shape(), b.shape()),
                    ));
                }
                matmul_into(a.data(), b.data(), out.data_mut(), m, k, n);
            }
            StaticOp::LayerNorm { eps } => {
                let (x, g, b) = (
                    lookup(mem, ins[0])?,
                    lookup(mem, ins[1])?,
                    lookup(mem, ins[2])?,
                );
                let d = g.len();
                if x.len() % d != 0 || b.len() != d || out.len() != x.len() {
                    return Err(mismatch(
                        LAYERNORM,
                        format!("{:?} with gamma {d}", x.shape()),
                    ));
                }
                layernorm_into(x.data(), g.data(), b.data(), *eps, out.data_mut(), d);
            }
            StaticOp::StepAttention {
                len,
                n_heads,
                head_dim,
                scale,
            } => {
                let w = n_heads * head_dim;
                let q = lookup(mem, ins[0])?;
                let (ck, cv) = (lookup(mem, ins[1])?, lookup(mem, ins[2])?);
                let (kn, vn) = (lookup(mem, ins[3])?, lookup(mem, ins[4])?);
                if *len == 0 {
                    return Err(Error::EmptyCache);
                }
                let cached = len - 1;
                if q.len() != w || kn.len() != w || vn.len() != w || ck.len() < cached * w {
                    return Err(mismatch(ATTENTION, format!("width {w}, cached {cached}")));
                }
                let rows = (0..cached)
                    .map(|p| {
                        (
                            &ck.data()[p * w..(p + 1) * w],
                            &cv.data()[p * w..(p + 1) * w],
                        )
                    })
                    .chain(std::iter::once((kn.data(), vn.data())));
                attend(q.data(), rows, *n_heads, *head_dim, *scale, out.data_mut());
            }
            StaticOp::ResidualAdd => unreachable!("handled in execute"),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn seeded(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        t(
            shape,
            &(0..n)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut out = Tensor::zeros(&[2, 2]);
        let spec = matmul(
            &t(&[2, 2], &[1., 0., 0., 1.]),
            &t(&[2, 2], &[3., 4., 5., 6.]),
            &mut out,
        )
        .unwrap();
        assert_eq!(out.data(), &[3., 4., 5., 6.]);
        assert_eq!(spec.op_class, OpClass::Static);
        assert_eq!(spec.flops, 16);

        let mut out = Tensor::zeros(&[1, 1]);
        matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.]), &mut out).unwrap();
        assert_eq!(out.data(), &[11.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let (a, b) = (seeded(&[4, 4], 1), seeded(&[4, 4], 2));
        let mut out = Tensor::zeros(&[4, 4]);
        matmul(&a, &b, &mut out).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0f32;
                for p in 0..4 {
                    acc += a.data()[i * 4 + p] * b.data()[p * 4 + j];
                }
                assert_eq!(out.data()[i * 4 + j].to_bits(), acc.to_bits());
            }
        }
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let mut out = Tensor::zeros(&[2, 2]);
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 2]), &mut out);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
        let mut out = Tensor::zeros(&[2, 3]);
        assert!(matmul(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2, 2]), &mut out).is_err());
    }

    #[test]
    fn layernorm_examples() {
        let ones = t(&[4], &[1.; 4]);
        let zeros = t(&[4], &[0.; 4]);
        let mut out = Tensor::zeros(&[1, 4]);
        layernorm(&t(&[1, 4], &[1.; 4]), &ones, &zeros, 1e-5, &mut out).unwrap();
        assert_eq!(out.data(), &[0.; 4]);

        let mut out = Tensor::zeros(&[1, 2]);
        layernorm(
            &t(&[1, 2], &[1., -1.]),
            &t(&[2], &[1.; 2]),
            &t(&[2], &[0.; 2]),
            1e-12,
            &mut out,
        )
        .unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-6 && (out.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layernorm_moments() {
        let x = seeded(&[3, 8], 7);
        let mut out = Tensor::zeros(&[3, 8]);
        let spec = layernorm(&x, &t(&[8], &[1.; 8]), &t(&[8], &[0.; 8]), 1e-9, &mut out).unwrap();
        assert_eq!(spec.flops, 8 * 3 * 8);
        for r in 0..3 {
            let row = out.row(r);
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn layernorm_rejects_nonpositive_eps() {
        let mut out = Tensor::zeros(&[1, 2]);
        assert!(layernorm(
            &Tensor::zeros(&[1, 2]),
            &Tensor::zeros(&[2]),
            &Tensor::zeros(&[2]),
            0.0,
            &mut out
        )
        .is_err());
        assert!(layernorm(
            &Tensor::zeros(&[1, 2]),
            &Tensor::zeros(&[3]),
            &Tensor::zeros(&[2]),
            1e-5,
            &mut out
        )
        .is_err());
    }

    fn append_rows(kv: &mut KvCache, k: &Tensor, v: &Tensor) {
        kv_append(kv, &[k], &[v]).unwrap();
    }

    #[test]
    fn attention_single_position_returns_value() {
        let mut kv = KvCache::new(1, 4, 2, 3);
        let (k, v) = (seeded(&[1, 6], 3), seeded(&[1, 6], 4));
        append_rows(&mut kv, &k, &v);
        let mut out = Tensor::zeros(&[1, 2, 3]);
        attention(&seeded(&[1, 2, 3], 5), &kv, 0, 1.0 / 3f32.sqrt(), &mut out).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_equal_keys_average_values() {
        let mut kv = KvCache::new(1, 4, 1, 2);
        let k = t(&[1, 2], &[0.5, -0.25]);
        let (v0, v1) = (t(&[1, 2], &[1., 2.]), t(&[1, 2], &[3., 7.]));
        append_rows(&mut kv, &k, &v0);
        append_rows(&mut kv, &k, &v1);
        let mut out = Tensor::zeros(&[1, 1, 2]);
        attention(&t(&[1, 1, 2], &[0.3, 0.9]), &kv, 0, 0.7, &mut out).unwrap();
        assert_eq!(out.data(), &[2., 4.5]);
    }

    #[test]
    fn attention_matches_naive_reference() {
        let (h, dh, len) = (2, 4, 5);
        let mut kv = KvCache::new(1, 8, h, dh);
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for p in 0..len {
            let (k, v) = (
                seeded(&[1, h * dh], 100 + p as u64),
                seeded(&[1, h * dh], 200 + p as u64),
            );
            append_rows(&mut kv, &k, &v);
            ks.push(k);
            vs.push(v);
        }
        let q = seeded(&[1, h, dh], 9);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = Tensor::zeros(&[1, h, dh]);
        let spec = attention(&q, &kv, 0, scale, &mut out).unwrap();
        assert_eq!(spec.flops, (h * (4 * len * dh + 3 * len + dh)) as u64);

        // reference in f64: scores, softmax, weighted sum
        for head in 0..h {
            let qh = &q.data()[head * dh..(head + 1) * dh];
            let scores: Vec<f64> = ks
                .iter()
                .map(|k| {
                    let kh = &k.data()[head * dh..(head + 1) * dh];
                    qh.iter()
                        .zip(kh)
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum::<f64>()
                        * scale as f64
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dh {
                let want: f64 = e
                    .iter()
                    .zip(&vs)
                    .map(|(w, v)| w / z * v.data()[head * dh + d] as f64)
                    .sum();
                let got = out.data()[head * dh + d] as f64;
                assert!(
                    (got - want).abs() < 1e-5,
                    "head {head} d {d}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn attention_on_empty_cache_fails() {
        let kv = KvCache::new(1, 4, 1, 2);
        let mut out = Tensor::zeros(&[1, 1, 2]);
        assert!(matches!(
            attention(&Tensor::zeros(&[1, 1, 2]), &kv, 0, 1.0, &mut out),
            Err(Error::EmptyCache)
        ));
    }

    #[test]
    fn embedding_lookup_examples() {
        let table = seeded(&[4, 3], 11);
        let mut out = Tensor::zeros(&[1, 3]);
        embedding_lookup(&[0], &table, &mut out).unwrap();
        assert_eq!(out.data(), table.row(0));
        let mut out = Tensor::zeros(&[2, 3]);
        embedding_lookup(&[2, 2], &table, &mut out).unwrap();
        assert_eq!(out.row(0), out.row(1));
        let mut out = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            embedding_lookup(&[4], &table, &mut out),
            Err(Error::TokenOutOfRange { id: 4, vocab: 4 })
        ));
    }

    #[test]
    fn kv_append_examples() {
        let mut kv = KvCache::new(1, 3, 1, 2);
        let rows: Vec<_> = (0..3)
            .map(|i| (seeded(&[1, 2], i), seeded(&[1, 2], 10 + i)))
            .collect();
        let spec = kv_append(&mut kv, &[&rows[0].0], &[&rows[0].1]).unwrap();
        assert_eq!(spec.op_class, OpClass::Dynamic);
        assert_eq!(kv.cur_len(), 1);
        assert_eq!(kv.keys(0).row(0), rows[0].0.data());
        for (k, v) in &rows[1..] {
            kv_append(&mut kv, &[k], &[v]).unwrap();
        }
        for (p, (k, v)) in rows.iter().enumerate() {
            assert_eq!(kv.keys(0).row(p), k.data());
            assert_eq!(kv.values(0).row(p), v.data());
        }
        assert!(matches!(
            kv_append(&mut kv, &[&rows[0].0], &[&rows[0].1]),
            Err(Error::CacheFull { max_seq: 3 })
        ));
    }

    #[test]
    fn greedy_sampling() {
        let mut s = Sampler::Greedy;
        assert_eq!(
            sample_token(&t(&[3], &[0.1, 0.9, 0.2]), &mut s).unwrap().0,
            1
        );
        assert_eq!(sample_token(&t(&[2], &[5., 5.]), &mut s).unwrap().0, 0);
    }

    #[test]
    fn temperature_sampling_is_uniform_on_flat_logits() {
        let mut s = Sampler::Temperature {
            t: 1.0,
            rng: ChaCha8Rng::seed_from_u64(42),
        };
        let logits = t(&[4], &[0.; 4]);
        let mut counts = [0usize; 4];
        let draws = 40_000;
        for _ in 0..draws {
            counts[sample_token(&logits, &mut s).unwrap().0] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.25).abs() <= 0.01, "frequency {f}");
        }
    }

    #[test]
    fn classification_is_total_and_fixed() {
        for name in STATIC_KERNELS {
            assert_eq!(op_class_of(name), OpClass::Static);
        }
        for name in DYNAMIC_KERNELS {
            assert_eq!(op_class_of(name), OpClass::Dynamic);
        }
    }

    #[test]
    fn step_attention_matches_append_then_attend() {
        let (h, dh) = (2, 2);
        let mut kv = KvCache::new(1, 8, h, dh);
        for p in 0..3 {
            append_rows(&mut kv, &seeded(&[1, 4], p), &seeded(&[1, 4], 50 + p));
        }
        let mut store = BufferStore::new();
        let q = store.insert(seeded(&[1, 4], 90));
        let kn = store.insert(seeded(&[1, 4], 91));
        let vn = store.insert(seeded(&[1, 4], 92));
        let out = store.alloc(&[1, 4]);
        let ck = store.insert(kv.keys(0).clone());
        let cv = store.insert(kv.values(0).clone());
        let scale = 0.5;
        let inv = KernelInvocation::bind(
            &store,
            StaticOp::StepAttention {
                len: 4,
                n_heads: h,
                head_dim: dh,
                scale,
            },
            vec![q, ck, cv, kn, vn],
            vec![out],
        )
        .unwrap();
        assert_eq!(inv.spec.flops, attention_flops(4, h, dh));
        inv.execute(&mut store).unwrap();

        let (knt, vnt) = (
            store.get(kn).unwrap().clone(),
            store.get(vn).unwrap().clone(),
        );
        kv_append(&mut kv, &[&knt], &[&vnt]).unwrap();
        let mut want = Tensor::zeros(&[1, h, dh]);
        attention(store.get(q).unwrap(), &kv, 0, scale, &mut want).unwrap();
        assert_eq!(store.get(out).unwrap().data(), want.data());
    }

    #[test]
    fn residual_add_in_place() {
        let mut store = BufferStore::new();
        let acc = store.insert(t(&[1, 3], &[1., 2., 3.]));
        let delta = store.insert(t(&[1, 3], &[0.5, 0.5, 0.5]));
        let inv =
            KernelInvocation::bind(&store, StaticOp::ResidualAdd, vec![acc, delta], vec![acc])
                .unwrap();
        assert_eq!(inv.spec.flops, 3);
        inv.execute(&mut store).unwrap();
        assert_eq!(store.get(acc).unwrap().data(), &[1.5, 2.5, 3.5]);
        assert!(store.get(acc).is_some());
    }
}
