//! Benchmark grid: repeated seeded trials over prompt and generation lengths,
//! CSV emission and summary tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cache::EvictionPolicy;
use crate::device::{CostModel, Jitter, Timeline};
use crate::error::{Error, Result};
use crate::model::{init_model, ModelConfig, Weights};
use crate::pipeline::{Engine, GenerationResult, PipelineConfig, RunMode, Sampling};

pub const CSV_HEADER: &str = "mode,prompt_len,gen_len,trial,ttft_us,total_us,mean_tok_us,p99_tok_us,dispatches,replays,captures,cache_hits,cache_misses";

/// Lengths 10, 50, 100, ..., 500.
pub fn default_lengths() -> Vec<usize> {
    std::iter::once(10).chain((50..=500).step_by(50)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub modes: Vec<RunMode>,
    pub prompt_lens: Vec<usize>,
    pub gen_lens: Vec<usize>,
    pub trials: usize,
    pub base_seed: u64,
    pub cost: CostModel,
    pub pipeline: PipelineConfig,
    /// Sampling temperature; zero selects greedy decoding.
    pub temperature: f32,
    pub out: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            modes: vec![RunMode::Eager, RunMode::Hybrid],
            prompt_lens: default_lengths(),
            gen_lens: default_lengths(),
            trials: 1000,
            base_seed: 0,
            cost: CostModel::default(),
            pipeline: PipelineConfig::default(),
            temperature: 0.0,
            out: None,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("{key}: cannot parse `{}`: {e}", value.trim())))
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        v => Err(Error::InvalidConfig(format!(
            "{key}: expected a boolean, got `{v}`"
        ))),
    }
}

impl BenchConfig {
    /// Applies one `section.key = value` setting. Hyphens and underscores
    /// in keys are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim().replace('-', "_");
        let v = value.trim();
        match k.as_str() {
            "model.n_layers" => self.model.n_layers = parse_num(key, v)?,
            "model.d_model" => self.model.d_model = parse_num(key, v)?,
            "model.n_heads" => self.model.n_heads = parse_num(key, v)?,
            "model.vocab" => self.model.vocab = parse_num(key, v)?,
            "model.max_seq" => self.model.max_seq = parse_num(key, v)?,
            "model.seed" => self.model.seed = parse_num(key, v)?,
            "bench.modes" | "bench.mode" => self.modes = parse_list(key, v)?,
            "bench.prompt_lens" => self.prompt_lens = parse_list(key, v)?,
            "bench.gen_lens" => self.gen_lens = parse_list(key, v)?,
            "bench.trials" => self.trials = parse_num(key, v)?,
            "bench.seed" => self.base_seed = parse_num(key, v)?,
            "bench.out" => self.out = Some(PathBuf::from(v)),
            "cost.launch_us" => self.cost.launch_overhead_us = parse_num(key, v)?,
            "cost.host_us" => self.cost.host_dispatch_us = parse_num(key, v)?,
            "cost.alpha" => self.cost.alpha_us_per_mflop = parse_num(key, v)?,
            "cost.capture_us" => self.cost.capture_cost_us_per_kernel = parse_num(key, v)?,
            "cost.jitter_sigma" => {
                let sigma: f64 = parse_num(key, v)?;
                self.cost.jitter = if sigma == 0.0 {
                    Jitter::None
                } else {
                    Jitter::LogNormal { sigma }
                };
            }
            "cache.capacity" => self.pipeline.cache_capacity = parse_num(key, v)?,
            "cache.policy" => {
                self.pipeline.eviction = match v.replace('-', "_").as_str() {
                    "least_used" | "lfu" => EvictionPolicy::LeastUsed,
                    "least_recent" | "lru" => EvictionPolicy::LeastRecent,
                    _ => return Err(Error::InvalidConfig(format!("{key}: unknown policy `{v}`"))),
                }
            }
            "cache.warmup" => {
                self.pipeline.warmup = if v == "none" {
                    None
                } else {
                    let (lo, hi) = v.split_once(['-', ',']).ok_or_else(|| {
                        Error::InvalidConfig(format!("{key}: expected `lo-hi` or `none`"))
                    })?;
                    Some((parse_num(key, lo)?, parse_num(key, hi)?))
                }
            }
            "pipeline.prefill_uses_graphs" => {
                self.pipeline.prefill_uses_graphs = parse_bool(key, v)?
            }
            "sampling.temperature" => self.temperature = parse_num(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a flat config file: one `section.key = value` per line, `#`
    /// starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k, v).map_err(|e| Error::ConfigParse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cost.validate()?;
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.modes.is_empty() || self.prompt_lens.is_empty() || self.gen_lens.is_empty() {
            return Err(Error::InvalidConfig(
                "modes and length lists must be non-empty".into(),
            ));
        }
        let max = self.model.max_seq;
        for &len in self.prompt_lens.iter().chain(&self.gen_lens) {
            if len == 0 || len > max {
                return Err(Error::LengthOutOfRange { len, max });
            }
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(
                "temperature must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Grid cells in output order, skipping those exceeding `max_seq`.
    pub fn cells(&self) -> (Vec<Cell>, Vec<Cell>) {
        let mut run = Vec::new();
        let mut skipped = Vec::new();
        for &mode in &self.modes {
            for &prompt_len in &self.prompt_lens {
                for &gen_len in &self.gen_lens {
                    let c = Cell {
                        mode,
                        prompt_len,
                        gen_len,
                    };
                    if prompt_len + gen_len <= self.model.max_seq {
                        run.push(c);
                    } else {
                        skipped.push(c);
                    }
                }
            }
        }
        (run, skipped)
    }

    fn sampling(&self, trial: u64) -> Sampling {
        if self.temperature == 0.0 {
            Sampling::Greedy
        } else {
            Sampling::Temperature {
                t: self.temperature,
                seed: self.base_seed ^ trial,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub mode: RunMode,
    pub prompt_len: usize,
    pub gen_len: usize,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} p={} g={}", self.mode, self.prompt_len, self.gen_len)
    }
}

/// Fixed prompt shared by every mode and trial at a given prompt length.
pub fn cell_prompt(base_seed: u64, prompt_len: usize, vocab: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        base_seed ^ (prompt_len as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    (0..prompt_len)
        .map(|_| rng.random_range(0..vocab))
        .collect()
}

/// One kept trial; mirrors a CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub mode: RunMode,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub trial: usize,
    pub ttft_us: f64,
    pub total_us: f64,
    pub mean_tok_us: f64,
    pub p99_tok_us: f64,
    pub dispatches: u64,
    pub replays: u64,
    pub captures: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

impl TrialRow {
    pub fn from_result(cell: Cell, trial: usize, r: &GenerationResult) -> Result<Self> {
        let c = r.counters();
        Ok(Self {
            mode: cell.mode,
            prompt_len: cell.prompt_len,
            gen_len: cell.gen_len,
            trial,
            ttft_us: r.ttft_us,
            total_us: r.total_us,
            mean_tok_us: r.mean_token_us(),
            p99_tok_us: percentile(&r.per_token_us, 99.0)?,
            dispatches: c.dispatches,
            replays: c.graph_replays,
            captures: c.captures,
            cache_hits: r.cache.hits,
            cache_misses: r.cache.misses,
        })
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.prompt_len,
            self.gen_len,
            self.trial,
            self.ttft_us,
            self.total_us,
            self.mean_tok_us,
            self.p99_tok_us,
            self.dispatches,
            self.replays,
            self.captures,
            self.cache_hits,
            self.cache_misses
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 13 {
            return Err(Error::InvalidConfig(format!(
                "csv row has {} fields, expected 13",
                f.len()
            )));
        }
        Ok(Self {
            mode: f[0].parse()?,
            prompt_len: parse_num("prompt_len", f[1])?,
            gen_len: parse_num("gen_len", f[2])?,
            trial: parse_num("trial", f[3])?,
            ttft_us: parse_num("ttft_us", f[4])?,
            total_us: parse_num("total_us", f[5])?,
            mean_tok_us: parse_num("mean_tok_us", f[6])?,
            p99_tok_us: parse_num("p99_tok_us", f[7])?,
            dispatches: parse_num("dispatches", f[8])?,
            replays: parse_num("replays", f[9])?,
            captures: parse_num("captures", f[10])?,
            cache_hits: parse_num("cache_hits", f[11])?,
            cache_misses: parse_num("cache_misses", f[12])?,
        })
    }
}

/// Nearest-rank percentile: the element at `ceil(p/100 * N) - 1` after
/// sorting.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidConfig(format!(
            "percentile {p} outside (0, 100]"
        )));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * s.len() as f64).ceil() as usize;
    Ok(s[rank.clamp(1, s.len()) - 1])
}

/// Per-cell statistics. TTFT statistics are over trials; per-token
/// statistics are over the per-trial mean token latencies. Counters are
/// totals across kept trials.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencySummary {
    pub mode: RunMode,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub trials: usize,
    pub ttft_mean: f64,
    pub ttft_p50: f64,
    pub ttft_p99: f64,
    pub tok_mean: f64,
    pub tok_p50: f64,
    pub tok_p99: f64,
    pub dispatches: u64,
    pub replays: u64,
    pub captures: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Groups rows by cell, in order of first appearance.
pub fn summarize(rows: &[TrialRow]) -> Result<Vec<LatencySummary>> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<(RunMode, usize, usize), Vec<&TrialRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.mode, r.prompt_len, r.gen_len);
        groups.entry(key).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        groups.get_mut(&key).unwrap().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let ttft: Vec<f64> = g.iter().map(|r| r.ttft_us).collect();
            let tok: Vec<f64> = g.iter().map(|r| r.mean_tok_us).collect();
            Ok(LatencySummary {
                mode: key.0,
                prompt_len: key.1,
                gen_len: key.2,
                trials: g.len(),
                ttft_mean: mean(&ttft),
                ttft_p50: percentile(&ttft, 50.0)?,
                ttft_p99: percentile(&ttft, 99.0)?,
                tok_mean: mean(&tok),
                tok_p50: percentile(&tok, 50.0)?,
                tok_p99: percentile(&tok, 99.0)?,
                dispatches: g.iter().map(|r| r.dispatches).sum(),
                replays: g.iter().map(|r| r.replays).sum(),
                captures: g.iter().map(|r| r.captures).sum(),
                cache_hits: g.iter().map(|r| r.cache_hits).sum(),
                cache_misses: g.iter().map(|r| r.cache_misses).sum(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub rows: Vec<TrialRow>,
    pub summary: Vec<LatencySummary>,
    pub skipped: Vec<Cell>,
    /// Timeline of the first kept trial of the first cell.
    pub trace: Option<Timeline>,
}

fn run_cell(
    cfg: &BenchConfig,
    weights: &Arc<Weights>,
    cell: Cell,
    keep_trace: bool,
) -> Result<(Vec<TrialRow>, Option<Timeline>)> {
    let prompt = cell_prompt(cfg.base_seed, cell.prompt_len, cfg.model.vocab);
    let mut pipeline = cfg.pipeline.clone();
    pipeline.sampling = cfg.sampling(0);
    let mut engine = Engine::new(Arc::clone(weights), cell.mode, &pipeline)?;
    let mut rows = Vec::with_capacity(cfg.trials);
    let mut trace = None;
    for t in 0..=cfg.trials as u64 {
        engine.set_sampling(cfg.sampling(t));
        let cost = cfg.cost.clone().with_seed(cfg.base_seed ^ t);
        let r = engine.generate(&prompt, cell.gen_len, &cost)?;
        if t == 0 {
            continue;
        }
        rows.push(TrialRow::from_result(cell, t as usize, &r)?);
        if keep_trace && t == 1 {
            trace = Some(r.timeline);
        }
    }
    Ok((rows, trace))
}

/// Runs every grid cell in parallel. Each cell warms its own engine, runs a
/// discarded warm-start trial 0, then kept trials `1..=trials` with jitter
/// seed `base_seed ^ t`. Output order is independent of scheduling.
pub fn run_bench(cfg: &BenchConfig, keep_trace: bool) -> Result<BenchOutput> {
    cfg.validate()?;
    let weights = Arc::new(init_model(cfg.model.clone())?);
    let (cells, skipped) = cfg.cells();
    for c in &skipped {
        log::warn!("skipping {c}: exceeds max_seq {}", cfg.model.max_seq);
    }
    let results: Vec<(Vec<TrialRow>, Option<Timeline>)> = cells
        .par_iter()
        .enumerate()
        .map(|(i, &cell)| {
            run_cell(cfg, &weights, cell, keep_trace && i == 0).map_err(|e| Error::Cell {
                cell: cell.to_string(),
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(cells.len() * cfg.trials);
    let mut trace = None;
    for (r, t) in results {
        rows.extend(r);
        trace = trace.or(t);
    }
    let summary = summarize(&rows)?;
    Ok(BenchOutput {
        rows,
        summary,
        skipped,
        trace,
    })
}

pub fn csv_string(rows: &[TrialRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn emit_csv(rows: &[TrialRow], path: &Path) -> Result<()> {
    std::fs::write(path, csv_string(rows))?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<TrialRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        _ => {
            return Err(Error::InvalidConfig(
                "csv header does not match schema".into(),
            ))
        }
    }
    lines
        .filter(|l| !l.is_empty())
        .map(TrialRow::from_csv)
        .collect()
}

fn table(
    summary: &[LatencySummary],
    title: &str,
    value: impl Fn(&LatencySummary) -> f64,
) -> String {
    let mut modes: Vec<RunMode> = summary.iter().map(|s| s.mode).collect();
    modes.sort();
    modes.dedup();
    let mut lens: Vec<(usize, usize)> = summary.iter().map(|s| (s.prompt_len, s.gen_len)).collect();
    lens.sort();
    lens.dedup();

    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{:>8} {:>8}", "prompt", "gen");
    for m in &modes {
        let _ = write!(out, " {:>14}", m.name());
    }
    out.push('\n');
    for (p, g) in lens {
        let _ = write!(out, "{p:>8} {g:>8}");
        for m in &modes {
            match summary
                .iter()
                .find(|s| s.mode == *m && s.prompt_len == p && s.gen_len == g)
            {
                Some(s) => {
                    let _ = write!(out, " {:>14.1}", value(s));
                }
                None => {
                    let _ = write!(out, " {:>14}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Two tables with lengths as rows and modes as columns: mean TTFT and p99
/// per-token latency, both in virtual microseconds.
pub fn emit_summary(summary: &[LatencySummary]) -> String {
    let mut s = table(summary, "TTFT mean (us)", |s| s.ttft_mean);
    s.push('\n');
    s.push_str(&table(summary, "per-token p99 (us)", |s| s.tok_p99));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            model: ModelConfig {
                n_layers: 1,
                d_model: 16,
                n_heads: 2,
                vocab: 32,
                max_seq: 64,
                seed: 1,
            },
            prompt_lens: vec![3],
            gen_lens: vec![4],
            modes: vec![RunMode::Hybrid],
            trials: 3,
            ..Default::default()
        }
    }

    #[test]
    fn percentile_nearest_rank() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&xs, 99.0).unwrap(), 99.0);
        assert_eq!(percentile(&xs, 100.0).unwrap(), 100.0);
        assert_eq!(percentile(&xs, 50.0).unwrap(), 50.0);
        assert_eq!(percentile(&[7.5], 1.0).unwrap(), 7.5);
        assert!(matches!(percentile(&[], 50.0), Err(Error::EmptySamples)));
        assert!(percentile(&xs, 0.0).is_err());
    }

    #[test]
    fn default_grid() {
        assert_eq!(
            default_lengths(),
            vec![10, 50, 100, 150, 200, 250, 300, 350, 400, 450, 500]
        );
        let c = BenchConfig::default();
        assert_eq!(c.trials, 1000);
        let (run, skipped) = c.cells();
        assert_eq!(run.len() + skipped.len(), 2 * 11 * 11);
        assert!(run.iter().all(|c| c.prompt_len + c.gen_len <= 600));
    }

    #[test]
    fn config_file() {
        let c = BenchConfig::parse(
            "# grid\nbench.modes = eager, hybrid,ablate-both\nbench.trials = 7\n\
             cost.jitter-sigma = 0\ncost.alpha = 0.5 # inline\ncache.warmup = 1-20\n\
             model.max_seq = 128\n",
        )
        .unwrap();
        assert_eq!(
            c.modes,
            vec![RunMode::Eager, RunMode::Hybrid, RunMode::AblateBoth]
        );
        assert_eq!(c.trials, 7);
        assert_eq!(c.cost.jitter, Jitter::None);
        assert_eq!(c.cost.alpha_us_per_mflop, 0.5);
        assert_eq!(c.pipeline.warmup, Some((1, 20)));
        assert!(matches!(
            BenchConfig::parse("x"),
            Err(Error::ConfigParse { line: 1, .. })
        ));
        assert!(matches!(
            BenchConfig::parse("\nfoo.bar = 1"),
            Err(Error::ConfigParse { line: 2, .. })
        ));
    }

    #[test]
    fn rows_per_cell_and_round_trip() {
        let cfg = small();
        let out = run_bench(&cfg, true).unwrap();
        assert_eq!(out.rows.len(), 3);
        assert_eq!(
            out.rows.iter().map(|r| r.trial).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert!(out.trace.is_some());
        let text = csv_string(&out.rows);
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        let back = parse_csv(&text).unwrap();
        assert_eq!(back, out.rows);
        assert_eq!(summarize(&back).unwrap(), out.summary);
    }

    #[test]
    fn deterministic_csv() {
        let mut cfg = small();
        cfg.modes = vec![RunMode::Eager, RunMode::Hybrid];
        cfg.prompt_lens = vec![2, 5];
        let a = csv_string(&run_bench(&cfg, false).unwrap().rows);
        let b = csv_string(&run_bench(&cfg, false).unwrap().rows);
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 1 + 2 * 2 * 3);
    }

    #[test]
    fn oversized_cells_skipped() {
        let mut cfg = small();
        cfg.prompt_lens = vec![3, 61];
        let out = run_bench(&cfg, false).unwrap();
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.rows.len(), 3);
        let mut bad = small();
        bad.gen_lens = vec![65];
        assert!(matches!(
            run_bench(&bad, false),
            Err(Error::LengthOutOfRange { .. })
        ));
    }

    #[test]
    fn summary_table_layout() {
        let mut cfg = small();
        cfg.modes = vec![RunMode::Eager, RunMode::Hybrid];
        let out = run_bench(&cfg, false).unwrap();
        let text = emit_summary(&out.summary);
        assert!(text.contains("eager") && text.contains("hybrid"));
        assert!(out
            .summary
            .iter()
            .all(|s| s.ttft_p50 <= s.ttft_p99 && s.tok_p50 <= s.tok_p99));
    }
}
