//! C ABI over the hybrid graph-replay runtime.
//!
//! Engines and results are opaque heap handles released with their `_free`
//! function. Every fallible call returns an [`HgStatus`]; on failure a
//! message for the calling thread is available from [`hg_last_error`].
//! Panics never cross the boundary and surface as [`HgStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use hybrid_graph::bench::{self, BenchConfig};
use hybrid_graph::device::{CostModel, Jitter};
use hybrid_graph::model::{init_model, ModelConfig};
use hybrid_graph::pipeline::{Engine, GenerationResult, PipelineConfig, RunMode};
use hybrid_graph::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    PromptTooLong = 3,
    TokenOutOfRange = 4,
    CacheCapacity = 5,
    GraphError = 6,
    Io = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HgRunMode {
    Eager = 0,
    Hybrid = 1,
    GraphOnly = 2,
    AblateAsync = 3,
    AblateFused = 4,
    AblateBoth = 5,
}

impl From<HgRunMode> for RunMode {
    fn from(m: HgRunMode) -> Self {
        match m {
            HgRunMode::Eager => RunMode::Eager,
            HgRunMode::Hybrid => RunMode::Hybrid,
            HgRunMode::GraphOnly => RunMode::GraphOnly,
            HgRunMode::AblateAsync => RunMode::AblateAsync,
            HgRunMode::AblateFused => RunMode::AblateFused,
            HgRunMode::AblateBoth => RunMode::AblateBoth,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HgModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl From<HgModelConfig> for ModelConfig {
    fn from(c: HgModelConfig) -> Self {
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            vocab: c.vocab,
            max_seq: c.max_seq,
            seed: c.seed,
        }
    }
}

/// Engine options. A warm-up range with `warmup_lo == 0` disables warm-up.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HgEngineOptions {
    pub mode: HgRunMode,
    pub warmup_lo: usize,
    pub warmup_hi: usize,
    pub cache_capacity: usize,
    pub prefill_uses_graphs: bool,
}

/// Costs in virtual microseconds. `jitter_sigma == 0` disables jitter.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HgCostModel {
    pub launch_overhead_us: f64,
    pub host_dispatch_us: f64,
    pub alpha_us_per_mflop: f64,
    pub capture_cost_us_per_kernel: f64,
    pub jitter_sigma: f64,
    pub jitter_seed: u64,
}

impl From<HgCostModel> for CostModel {
    fn from(c: HgCostModel) -> Self {
        Self {
            launch_overhead_us: c.launch_overhead_us,
            host_dispatch_us: c.host_dispatch_us,
            alpha_us_per_mflop: c.alpha_us_per_mflop,
            capture_cost_us_per_kernel: c.capture_cost_us_per_kernel,
            jitter: if c.jitter_sigma == 0.0 {
                Jitter::None
            } else {
                Jitter::LogNormal {
                    sigma: c.jitter_sigma,
                }
            },
            jitter_seed: c.jitter_seed,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HgCounters {
    pub dispatches: u64,
    pub kernel_launches: u64,
    pub graph_replays: u64,
    pub captures: u64,
    pub fused_blocks: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub replay_steps: u64,
    pub fallback_steps: u64,
}

/// Opaque engine handle.
pub struct HgEngine {
    engine: Engine,
}

/// Opaque generation result handle.
pub struct HgResult {
    tokens: Vec<u32>,
    result: GenerationResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HgStatus {
    match e {
        Error::Step { source, .. } | Error::Cell { source, .. } => status_of(source),
        Error::PromptTooLong { .. } | Error::CacheFull { .. } => HgStatus::PromptTooLong,
        Error::TokenOutOfRange { .. } => HgStatus::TokenOutOfRange,
        Error::WarmupExceedsCapacity { .. } => HgStatus::CacheCapacity,
        Error::CaptureInProgress(_)
        | Error::CaptureViolation(_)
        | Error::ForeignBuffer { .. }
        | Error::SessionClosed
        | Error::EmptyCapture
        | Error::ReplayShapeError { .. }
        | Error::WrongLength { .. }
        | Error::KeyMismatch { .. } => HgStatus::GraphError,
        Error::Io(_) => HgStatus::Io,
        _ => HgStatus::InvalidArgument,
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (HgStatus, String)>) -> HgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HgStatus::Internal
        }
    }
}

fn core_err(e: Error) -> (HgStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (HgStatus, String) {
    (HgStatus::NullPointer, format!("{what} is null"))
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn hg_status_str(status: HgStatus) -> *const c_char {
    let s: &'static CStr = match status {
        HgStatus::Ok => c"ok",
        HgStatus::NullPointer => c"null pointer",
        HgStatus::InvalidArgument => c"invalid argument",
        HgStatus::PromptTooLong => c"prompt too long",
        HgStatus::TokenOutOfRange => c"token out of range",
        HgStatus::CacheCapacity => c"cache capacity exceeded",
        HgStatus::GraphError => c"graph error",
        HgStatus::Io => c"i/o error",
        HgStatus::Internal => c"internal error",
    };
    s.as_ptr()
}

#[no_mangle]
pub extern "C" fn hg_model_config_default() -> HgModelConfig {
    let c = ModelConfig::default();
    HgModelConfig {
        n_layers: c.n_layers,
        d_model: c.d_model,
        n_heads: c.n_heads,
        vocab: c.vocab,
        max_seq: c.max_seq,
        seed: c.seed,
    }
}

#[no_mangle]
pub extern "C" fn hg_engine_options_default() -> HgEngineOptions {
    let p = PipelineConfig::default();
    let (lo, hi) = p.warmup.unwrap_or((0, 0));
    HgEngineOptions {
        mode: HgRunMode::Hybrid,
        warmup_lo: lo,
        warmup_hi: hi,
        cache_capacity: p.cache_capacity,
        prefill_uses_graphs: p.prefill_uses_graphs,
    }
}

#[no_mangle]
pub extern "C" fn hg_cost_model_default() -> HgCostModel {
    let c = CostModel::default();
    HgCostModel {
        launch_overhead_us: c.launch_overhead_us,
        host_dispatch_us: c.host_dispatch_us,
        alpha_us_per_mflop: c.alpha_us_per_mflop,
        capture_cost_us_per_kernel: c.capture_cost_us_per_kernel,
        jitter_sigma: match c.jitter {
            Jitter::None => 0.0,
            Jitter::LogNormal { sigma } => sigma,
        },
        jitter_seed: c.jitter_seed,
    }
}

/// Builds the model and a warmed engine. On success `*out` owns a handle to
/// release with [`hg_engine_free`].
///
/// # Safety
/// `model`, `options` and `out` must be valid pointers or null.
#[no_mangle]
pub unsafe extern "C" fn hg_engine_new(
    model: *const HgModelConfig,
    options: *const HgEngineOptions,
    out: *mut *mut HgEngine,
) -> HgStatus {
    guard(|| {
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let opts = unsafe { options.as_ref() }.ok_or_else(|| null("options"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let weights = Arc::new(init_model((*model).into()).map_err(core_err)?);
        let cfg = PipelineConfig {
            warmup: (opts.warmup_lo != 0).then_some((opts.warmup_lo, opts.warmup_hi)),
            cache_capacity: opts.cache_capacity,
            prefill_uses_graphs: opts.prefill_uses_graphs,
            ..Default::default()
        };
        let engine = Engine::new(weights, opts.mode.into(), &cfg).map_err(core_err)?;
        *out = Box::into_raw(Box::new(HgEngine { engine }));
        Ok(())
    })
}

/// # Safety
/// `engine` must come from [`hg_engine_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hg_engine_free(engine: *mut HgEngine) {
    if !engine.is_null() {
        drop(unsafe { Box::from_raw(engine) });
    }
}

/// Number of graphs currently cached by the engine, or 0 for null.
///
/// # Safety
/// `engine` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hg_engine_cached_graphs(engine: *const HgEngine) -> usize {
    unsafe { engine.as_ref() }.map_or(0, |e| e.engine.cache().len())
}

/// Generates `n` tokens after `prompt`. Graphs persist in the engine across
/// calls. On success `*out` owns a result to release with
/// [`hg_result_free`].
///
/// # Safety
/// `engine` must be a live handle, `prompt` must point to `prompt_len`
/// tokens, `cost` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hg_engine_generate(
    engine: *mut HgEngine,
    prompt: *const u32,
    prompt_len: usize,
    n: usize,
    cost: *const HgCostModel,
    out: *mut *mut HgResult,
) -> HgStatus {
    guard(|| {
        let engine = unsafe { engine.as_mut() }.ok_or_else(|| null("engine"))?;
        let cost = unsafe { cost.as_ref() }.ok_or_else(|| null("cost"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let prompt: Vec<usize> = if prompt_len == 0 {
            Vec::new()
        } else if prompt.is_null() {
            return Err(null("prompt"));
        } else {
            unsafe { std::slice::from_raw_parts(prompt, prompt_len) }
                .iter()
                .map(|&t| t as usize)
                .collect()
        };
        let result = engine
            .engine
            .generate(&prompt, n, &(*cost).into())
            .map_err(core_err)?;
        let tokens = result.tokens.iter().map(|&t| t as u32).collect();
        *out = Box::into_raw(Box::new(HgResult { tokens, result }));
        Ok(())
    })
}

/// # Safety
/// `result` must come from [`hg_engine_generate`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn hg_result_free(result: *mut HgResult) {
    if !result.is_null() {
        drop(unsafe { Box::from_raw(result) });
    }
}

/// Generated tokens; the array lives as long as the result.
///
/// # Safety
/// `result` must be a live handle; `len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hg_result_tokens(result: *const HgResult, len: *mut usize) -> *const u32 {
    match (unsafe { result.as_ref() }, unsafe { len.as_mut() }) {
        (Some(r), Some(len)) => {
            *len = r.tokens.len();
            r.tokens.as_ptr()
        }
        _ => ptr::null(),
    }
}

/// Per-token latencies in virtual microseconds; the array lives as long as
/// the result.
///
/// # Safety
/// `result` must be a live handle; `len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hg_result_per_token_us(
    result: *const HgResult,
    len: *mut usize,
) -> *const f64 {
    match (unsafe { result.as_ref() }, unsafe { len.as_mut() }) {
        (Some(r), Some(len)) => {
            *len = r.result.per_token_us.len();
            r.result.per_token_us.as_ptr()
        }
        _ => ptr::null(),
    }
}

/// Time to first token in virtual microseconds, or NaN for null.
///
/// # Safety
/// `result` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hg_result_ttft_us(result: *const HgResult) -> f64 {
    unsafe { result.as_ref() }.map_or(f64::NAN, |r| r.result.ttft_us)
}

/// # Safety
/// `result` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn hg_result_counters(
    result: *const HgResult,
    out: *mut HgCounters,
) -> HgStatus {
    guard(|| {
        let r = unsafe { result.as_ref() }.ok_or_else(|| null("result"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let c = r.result.counters();
        *out = HgCounters {
            dispatches: c.dispatches,
            kernel_launches: c.kernel_launches,
            graph_replays: c.graph_replays,
            captures: c.captures,
            fused_blocks: c.fused_blocks,
            cache_hits: r.result.cache.hits,
            cache_misses: r.result.cache.misses,
            replay_steps: r.result.replays() as u64,
            fallback_steps: r.result.fallbacks() as u64,
        };
        Ok(())
    })
}

/// Nearest-rank percentile of `len` samples.
///
/// # Safety
/// `samples` must point to `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hg_percentile(
    samples: *const f64,
    len: usize,
    p: f64,
    out: *mut f64,
) -> HgStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let xs = if len == 0 {
            &[][..]
        } else if samples.is_null() {
            return Err(null("samples"));
        } else {
            unsafe { std::slice::from_raw_parts(samples, len) }
        };
        *out = bench::percentile(xs, p).map_err(core_err)?;
        Ok(())
    })
}

/// Runs a benchmark described by flat `section.key = value` text and writes
/// the CSV to `out_path`.
///
/// # Safety
/// Both arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn hg_bench_run_csv(
    config: *const c_char,
    out_path: *const c_char,
) -> HgStatus {
    guard(|| {
        if config.is_null() {
            return Err(null("config"));
        }
        if out_path.is_null() {
            return Err(null("out_path"));
        }
        let text = unsafe { CStr::from_ptr(config) }
            .to_str()
            .map_err(|e| (HgStatus::InvalidArgument, e.to_string()))?;
        let path = unsafe { CStr::from_ptr(out_path) }
            .to_str()
            .map_err(|e| (HgStatus::InvalidArgument, e.to_string()))?;
        let cfg = BenchConfig::parse(text).map_err(core_err)?;
        let out = bench::run_bench(&cfg, false).map_err(core_err)?;
        bench::emit_csv(&out.rows, Path::new(path)).map_err(core_err)?;
        Ok(())
    })
}
