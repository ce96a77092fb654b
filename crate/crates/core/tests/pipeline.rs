mod common;

use std::sync::Arc;

use hybrid_graph::device::{CostModel, ItemKind, StreamId};
use hybrid_graph::error::Error;
use hybrid_graph::model::ModelConfig;
use hybrid_graph::pipeline::{run_inference, Engine, PipelineConfig, RunMode, StepPath};

use common::*;

fn quiet() -> CostModel {
    CostModel::default().without_jitter()
}

#[test]
fn eager_ttft_matches_first_principles() {
    let w = weights(0);
    for p in [1, 7, 33] {
        let r = run_inference(
            Arc::clone(&w),
            &vec![5; p],
            3,
            RunMode::Eager,
            &quiet(),
            &PipelineConfig::default(),
        )
        .unwrap();
        let want = eager_ttft(&quiet(), &ModelConfig::default(), p);
        assert!(
            (r.ttft_us - want).abs() < 1e-6,
            "p={p}: {} vs {want}",
            r.ttft_us
        );
    }
}

#[test]
fn path_accounting_in_hybrid() {
    let r = run_inference(
        weights(1),
        &[3; 30],
        45,
        RunMode::Hybrid,
        &quiet(),
        &PipelineConfig::default(),
    )
    .unwrap();
    let replays = r.steps.iter().filter(|s| s.len <= 50).count();
    assert_eq!(r.replays(), replays);
    assert_eq!(r.fallbacks(), r.steps.iter().filter(|s| s.len > 50).count());
    assert_eq!(r.counters().captures as usize, r.fallbacks());
    assert!(r
        .steps
        .iter()
        .all(|s| (s.path == StepPath::Replay) == (s.len <= 50)));
}

#[test]
fn requested_lengths_are_contiguous() {
    let r = run_inference(
        weights(2),
        &[1, 2, 3, 4],
        9,
        RunMode::GraphOnly,
        &quiet(),
        &PipelineConfig::default(),
    )
    .unwrap();
    let lens: Vec<usize> = r.steps.iter().map(|s| s.len).collect();
    assert_eq!(lens, (1..=13).collect::<Vec<_>>());
    assert_eq!(r.cache.misses, 0);
    assert_eq!(r.cache.hits, 13);
}

#[test]
fn hybrid_capture_never_delays_replay_stream() {
    let cfg = PipelineConfig::default();
    let h = run_inference(weights(0), &[9; 60], 10, RunMode::Hybrid, &quiet(), &cfg).unwrap();
    let g = run_inference(weights(0), &[9; 60], 10, RunMode::GraphOnly, &quiet(), &cfg).unwrap();
    assert_eq!(h.ttft_us, g.ttft_us);
    assert_eq!(h.per_token_us, g.per_token_us);
    let caps: Vec<_> = h.timeline.on(StreamId::Capture).collect();
    assert_eq!(caps.len(), 20);
    assert!(caps.iter().all(|r| r.kind == ItemKind::Capture));
}

#[test]
fn ablations_order_under_default_costs() {
    let prompt = vec![4; 80];
    let cfg = PipelineConfig::default();
    let r = |m| run_inference(weights(0), &prompt, 30, m, &quiet(), &cfg).unwrap();
    let (h, a, f, b) = (
        r(RunMode::Hybrid),
        r(RunMode::AblateAsync),
        r(RunMode::AblateFused),
        r(RunMode::AblateBoth),
    );
    assert!(a.ttft_us > h.ttft_us);
    assert!(f.mean_token_us() > h.mean_token_us());
    assert!(b.mean_token_us() >= f.mean_token_us().max(a.mean_token_us()));
    assert!(b.ttft_us >= f.ttft_us.max(a.ttft_us));
}

#[test]
fn release_keeps_used_and_new_graphs() {
    let mut e = Engine::new(weights(0), RunMode::Hybrid, &PipelineConfig::default()).unwrap();
    e.generate(&[1; 10], 100, &quiet()).unwrap();
    assert_eq!(e.cache().keys(), (1..=110).collect::<Vec<_>>());
    e.generate(&[1; 3], 4, &quiet()).unwrap();
    assert_eq!(e.cache().keys(), (1..=7).collect::<Vec<_>>());
}

#[test]
fn errors_carry_step_index() {
    let w = weights(0);
    let err = run_inference(
        w,
        &[1, 2, 999],
        2,
        RunMode::Hybrid,
        &quiet(),
        &PipelineConfig::default(),
    )
    .unwrap_err();
    match err {
        Error::Step { step, source } => {
            assert_eq!(step, 2);
            assert!(matches!(*source, Error::TokenOutOfRange { id: 999, .. }));
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn warmup_larger_than_capacity_fails() {
    let cfg = PipelineConfig {
        cache_capacity: 10,
        ..Default::default()
    };
    assert!(matches!(
        Engine::new(weights(0), RunMode::Hybrid, &cfg),
        Err(Error::WarmupExceedsCapacity {
            requested: 50,
            capacity: 10
        })
    ));
    assert!(Engine::new(weights(0), RunMode::Eager, &cfg).is_ok());
}
